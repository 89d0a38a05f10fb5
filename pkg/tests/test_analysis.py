"""Diagnostics: attention medians vs a sort oracle, the adapter-depth sweep,
and the two-route (metered vs closed-form) cost accounting."""

import json

import numpy as np
import pytest

import fusedet.tensor as T
from fusedet.adapter import AdapterConfig, adapter_param_flops
from fusedet.analysis import (AblationResult, AttentionProfile,
                              attention_medians, compute_report, layer_sweep,
                              median_latency_ms, rank_layers, read_csv,
                              sweep_means, write_ablation_csv,
                              write_attention_csv, write_compute_csv)
from fusedet.config import ExperimentConfig
from fusedet.detector import DetectorConfig
from fusedet.mllm import MiniMllm, MllmConfig, TAG_SYSTEM, TAG_TEXT, TAG_VISION
from fusedet import training as tr
from fusedet.tensor import UsageError


def small_mllm(n=2, seed=5):
    cfg = MllmConfig(d_lm=16, n=n, heads=2, patch=4, shuffle_r=2, canvas=16,
                     proj_in=192, proj_hidden=24, sys_len=2)
    return MiniMllm(cfg, np.random.default_rng(seed))


def small_batch(rng, b=2, t=5, canvas=16, vocab=64):
    images = rng.standard_normal((b, 3, canvas, canvas)) * 0.2
    ids = rng.integers(1, vocab, (b, t))
    valid = np.ones((b, t), dtype=bool)
    valid[0, t - 1] = False
    return images, ids, valid


# ---------------------------------------------------------------------------
# attention medians
# ---------------------------------------------------------------------------


def oracle_medians(mllm, images, ids, valid):
    """Independent aggregation: explicit loops over admissible (query, key)
    pairs and a sort-based median."""
    x, layout = mllm.embed_sequence(T.constant(np.asarray(images, float)),
                                    np.asarray(ids, dtype=np.intp))
    _, scores = mllm.forward_collect(x, layout, valid, return_scores=True)
    t0, t1 = layout.text_span
    n = len(layout.tags)
    out = {"system": [], "vision": [], "text": []}
    tag_of = {"system": TAG_SYSTEM, "vision": TAG_VISION, "text": TAG_TEXT}
    for s in scores:
        b, h = s.shape[:2]
        for name, tag in tag_of.items():
            per = np.empty((b, h))
            for i in range(b):
                for j in range(h):
                    vals = []
                    for q in range(n):
                        for k in range(n):
                            if k > q or layout.tags[k] != tag:
                                continue
                            if t0 <= k < t1 and not valid[i, k - t0]:
                                continue
                            vals.append(s[i, j, q, k])
                    srt = sorted(vals)
                    m = len(srt)
                    per[i, j] = (srt[m // 2] if m % 2
                                 else (srt[m // 2 - 1] + srt[m // 2]) / 2)
            out[name].append(float(per.mean()))
    return out


class TestAttentionMedians:
    def test_profile_depth_matches_model(self):
        mllm = small_mllm(n=3)
        images, ids, valid = small_batch(np.random.default_rng(0))
        prof = attention_medians(mllm, images, ids, valid)
        assert prof.depth == 3
        assert len(prof.layer_rows()) == 9

    def test_matches_sort_oracle(self):
        mllm = small_mllm(n=2)
        images, ids, valid = small_batch(np.random.default_rng(1))
        prof = attention_medians(mllm, images, ids, valid)
        want = oracle_medians(mllm, images, ids, valid)
        for name in ("system", "vision", "text"):
            assert prof.medians[name] == want[name]

    def test_zero_key_projection_gives_zero_medians(self):
        # zero K rows make every dot product exactly zero (RoPE rotates the
        # zero vector to itself), so all medians are exactly 0
        mllm = small_mllm(n=1)
        blk = mllm.blocks[0]
        blk.attn.wk.zero_()
        images, ids, valid = small_batch(np.random.default_rng(2))
        prof = attention_medians(mllm, images, ids, valid)
        for vals in prof.medians.values():
            assert vals == [0.0]

    def test_deterministic(self):
        mllm = small_mllm()
        images, ids, valid = small_batch(np.random.default_rng(3))
        a = attention_medians(mllm, images, ids, valid)
        b = attention_medians(mllm, images, ids, valid)
        assert json.dumps(a.medians) == json.dumps(b.medians)

    def test_requires_text_tokens(self):
        mllm = small_mllm()
        images = np.zeros((1, 3, 16, 16))
        with pytest.raises(UsageError, match="text batch"):
            attention_medians(mllm, images, np.zeros((1, 0), dtype=np.intp))

    def test_fully_masked_row_rejected(self):
        mllm = small_mllm()
        images, ids, valid = small_batch(np.random.default_rng(4))
        valid[1, :] = False
        with pytest.raises(UsageError, match="admits no"):
            attention_medians(mllm, images, ids, valid)

    def test_profile_invariants(self):
        with pytest.raises(UsageError, match="modalities"):
            AttentionProfile({"vision": [0.1]})
        with pytest.raises(UsageError, match="layer count"):
            AttentionProfile({"system": [0.1], "vision": [0.1, 0.2],
                              "text": [0.1]})
        with pytest.raises(UsageError, match="non-finite"):
            AttentionProfile({"system": [0.1], "vision": [np.nan],
                              "text": [0.1]})

    def test_csv_round_trip(self, tmp_path):
        mllm = small_mllm(n=2)
        images, ids, valid = small_batch(np.random.default_rng(6))
        prof = attention_medians(mllm, images, ids, valid)
        path = tmp_path / "attention_profile.csv"
        write_attention_csv(prof, path)
        header, rows = read_csv(path)
        assert header == ["layer", "modality", "median"]
        assert len(rows) == 6
        assert float(rows[1][2]) == prof.medians[rows[1][1]][0]


# ---------------------------------------------------------------------------
# layer sweep
# ---------------------------------------------------------------------------


def sweep_config():
    return ExperimentConfig(
        n_pretrain=24, n_train=24, n_val=12,
        pretrain_steps=8, s1_steps=6, s2_steps=4, s3_steps=4, sub_steps=4,
        pretrain_batch=4, s1_batch=4, s2_batch=4, s3_batch=4, sub_batch=4,
        eval_chunk=8)


@pytest.fixture(scope="module")
def sweep_bench():
    cfg = sweep_config()
    mllm, det, _ = tr.prepare_backbones(cfg)
    snap = tr.snapshot(mllm.projector)
    train = tr.load_split(cfg, "train")
    vals = {"val-category": tr.load_split(cfg, "val-category"),
            "val-spatial": tr.load_split(cfg, "val-spatial")}
    cache = tr.Stage3Cache(mllm, det, train, cfg.l_d, full_decode=False,
                           chunk=cfg.eval_chunk)
    return cfg, mllm, det, snap, train, vals, cache


class TestLayerSweep:
    def test_point_count_and_fields(self, sweep_bench):
        cfg, mllm, det, snap, train, vals, cache = sweep_bench
        res = layer_sweep(cfg, mllm, det, snap, train, vals,
                          l_lm_values=[0, 1, 4], seeds=[0, 1], cache=cache)
        assert len(res) == 6
        assert sorted({(r.l_lm, r.seed) for r in res}) == [
            (0, 0), (0, 1), (1, 0), (1, 1), (4, 0), (4, 1)]
        for r in res:
            assert set(r.metrics) == {"val-category", "val-spatial"}
            assert "per_scene" not in r.metrics["val-category"]

    def test_depth_zero_taps_pre_decoder_state(self, sweep_bench):
        cfg, mllm, det, snap, train, vals, cache = sweep_bench
        rng = np.random.default_rng(7)
        vis = T.constant(rng.standard_normal((2, mllm.cfg.l_v, mllm.cfg.d_lm)))
        e_v, _ = mllm.hidden_from_aligned(vis, 0)
        assert np.array_equal(e_v.data, vis.data)

    def test_out_of_range_depth_rejected(self, sweep_bench):
        cfg, mllm, det, snap, train, vals, cache = sweep_bench
        with pytest.raises(UsageError, match="outside the decoder depth"):
            layer_sweep(cfg, mllm, det, snap, train, vals,
                        l_lm_values=[0, 9], seeds=[0], cache=cache)

    def test_missing_snapshot_rejected(self, sweep_bench):
        cfg, mllm, det, snap, train, vals, cache = sweep_bench
        with pytest.raises(UsageError, match="projector snapshot"):
            layer_sweep(cfg, mllm, det, None, train, vals,
                        l_lm_values=[1], seeds=[0], cache=cache)

    def test_points_reproduce_bitwise(self, sweep_bench):
        cfg, mllm, det, snap, train, vals, cache = sweep_bench
        runs = [layer_sweep(cfg, mllm, det, snap, train, vals,
                            l_lm_values=[2], seeds=[3], cache=cache)[0]
                for _ in range(2)]
        assert json.dumps(runs[0].metrics, sort_keys=True) == \
            json.dumps(runs[1].metrics, sort_keys=True)

    def test_means_and_ranking(self, sweep_bench):
        cfg, mllm, det, snap, train, vals, cache = sweep_bench
        res = layer_sweep(cfg, mllm, det, snap, train, vals,
                          l_lm_values=[0, 2], seeds=[0, 1], cache=cache)
        means = sweep_means(res, "val-spatial", "acc")
        assert set(means) == {0, 2}
        for l_lm in means:
            vals_l = [r.metrics["val-spatial"]["acc"] for r in res
                      if r.l_lm == l_lm]
            assert means[l_lm] == pytest.approx(np.mean(vals_l))
        ranked = rank_layers(res, "val-spatial", "acc")
        assert [l for l, _ in sorted(ranked)] == [0, 2]
        assert ranked[0][1] >= ranked[1][1]
        with pytest.raises(UsageError, match="no metric"):
            sweep_means(res, "val-spatial", "not-a-metric")

    def test_ablation_csv(self, sweep_bench, tmp_path):
        cfg, mllm, det, snap, train, vals, cache = sweep_bench
        res = layer_sweep(cfg, mllm, det, snap, train, vals,
                          l_lm_values=[1], seeds=[0, 1], cache=cache)
        path = tmp_path / "ablation.csv"
        write_ablation_csv(res, path)
        header, rows = read_csv(path)
        assert header[:2] == ["l_lm", "seed"]
        assert "val-spatial/acc" in header
        assert len(rows) == 2
        col = header.index("val-spatial/acc")
        assert float(rows[0][col]) == res[0].metrics["val-spatial"]["acc"]

    def test_negative_depth_rejected(self):
        with pytest.raises(UsageError, match=">= 0"):
            AblationResult(l_lm=-1, seed=0, metrics={})


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------


def random_accounting_configs(rng):
    heads = int(rng.choice([2, 4]))
    d = int(rng.choice([16, 32]))
    d_lm = int(rng.choice([16, 32]))
    canvas = int(rng.choice([16, 32]))
    r = int(rng.choice([1, 2]))
    n = int(rng.integers(1, 4))
    mcfg = MllmConfig(d_lm=d_lm, n=n, heads=heads, patch=4, canvas=canvas,
                      shuffle_r=r, proj_in=48 * r * r,
                      proj_hidden=int(rng.choice([16, 24])),
                      sys_len=int(rng.integers(1, 3)))
    dcfg = DetectorConfig(d=d, heads=heads, depth=int(rng.integers(1, 4)),
                          queries=int(rng.integers(2, 5)))
    arch = ("I", "II", "III", "IV")[rng.integers(4)]
    acfg = AdapterConfig(arch=arch, d=d, d_lm=d_lm, heads=heads,
                         grid=mcfg.aligned_grid,
                         l_lm=int(rng.integers(0, n + 1)),
                         l_d=int(rng.integers(1, dcfg.depth + 1)),
                         conv_stride=int(rng.choice([1, 2])),
                         n_lm=n, depth=dcfg.depth)
    return dcfg, mcfg, acfg


class TestComputeReport:
    @pytest.mark.parametrize("arch", ["I", "II", "III", "IV"])
    def test_metered_equals_analytic(self, arch):
        cfg = ExperimentConfig()
        rows = compute_report(cfg.detector_config(), cfg.mllm_config(),
                              cfg.adapter_config(arch=arch))
        for row in rows:
            assert row["flops_metered"] == row["flops_analytic"], row["framework"]

    def test_random_configs_metered_equals_analytic(self):
        rng = np.random.default_rng(11)
        for _ in range(6):
            dcfg, mcfg, acfg = random_accounting_configs(rng)
            rows = compute_report(dcfg, mcfg, acfg)
            for row in rows:
                assert row["flops_metered"] == row["flops_analytic"], \
                    (row["framework"], acfg.arch)

    def test_deltas_additive(self):
        cfg = ExperimentConfig()
        rows = compute_report(cfg.detector_config(), cfg.mllm_config(),
                              cfg.adapter_config())
        total = rows[-1]
        assert total["framework"] == "total"
        assert total["flops_metered"] == sum(r["flops_metered"]
                                             for r in rows[:-1])
        assert total["flops_analytic"] == sum(r["flops_analytic"]
                                              for r in rows[:-1])
        assert total["params"] == sum(r["params"] for r in rows[:-1])

    def test_adapter_row_params_match_closed_form(self):
        cfg = ExperimentConfig()
        acfg = cfg.adapter_config()
        rows = compute_report(cfg.detector_config(), cfg.mllm_config(), acfg)
        assert rows[1]["framework"] == "+adapter"
        assert rows[1]["params"] == adapter_param_flops(acfg)[0]

    def test_detector_row_params_match_hand_count(self):
        cfg = ExperimentConfig()
        dcfg, mcfg = cfg.detector_config(), cfg.mllm_config()
        rows = compute_report(dcfg, mcfg, cfg.adapter_config())
        d, q, v = dcfg.d, dcfg.queries, dcfg.vocab
        dp = mcfg.d_patch
        p = mcfg.grid[0] * mcfg.grid[1]
        mha = 4 * (d * d + d)
        ln = 2 * d
        mlp = d * (dcfg.mlp_ratio * d) + dcfg.mlp_ratio * d \
            + (dcfg.mlp_ratio * d) * d + d
        per_layer = 4 * ln + 3 * mha + mlp
        det_params = (dp * d + d) + p * d + (v * d + mha + ln) + q * d \
            + dcfg.depth * per_layer + ln + (d * d + d + d * 4 + 4) \
            + (d * d + d) + d
        patch_params = dp * dp + dp
        assert rows[0]["params"] == det_params + patch_params

    def test_mismatched_configs_rejected(self):
        cfg = ExperimentConfig()
        with pytest.raises(UsageError, match="grid"):
            compute_report(cfg.detector_config(), cfg.mllm_config(),
                           AdapterConfig(grid=(5, 5)))
        bad = AdapterConfig(d=32, grid=cfg.mllm_config().aligned_grid)
        with pytest.raises(UsageError, match="widths"):
            compute_report(cfg.detector_config(), cfg.mllm_config(), bad)

    def test_csv_schema(self, tmp_path):
        cfg = ExperimentConfig()
        rows = compute_report(cfg.detector_config(), cfg.mllm_config(),
                              cfg.adapter_config())
        path = tmp_path / "compute_report.csv"
        write_compute_csv(rows, path)
        header, table = read_csv(path)
        assert header == ["Framework", "Params", "GFLOPs", "Latency"]
        assert [r[0] for r in table] == ["detector", "+adapter",
                                        "+lm-prompts", "total"]
        for r in table:
            assert int(r[1]) > 0
            assert float(r[2]) > 0
            assert r[3] == ""

    def test_latency_measured_on_request(self, tmp_path):
        rng = np.random.default_rng(12)
        dcfg, mcfg, acfg = random_accounting_configs(rng)
        rows = compute_report(dcfg, mcfg, acfg, measure_latency=True,
                              repeats=3, warmup=1)
        for row in rows:
            assert row["latency_ms"] > 0
        path = tmp_path / "compute_report.csv"
        write_compute_csv(rows, path)
        _, table = read_csv(path)
        assert all(float(r[3]) > 0 for r in table)

    def test_median_latency_is_positive(self):
        assert median_latency_ms(lambda: sum(range(100)), repeats=5,
                                 warmup=1) > 0
