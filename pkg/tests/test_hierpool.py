import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from textmil import tape as tp
from textmil.errors import ConfigError, DataError
from textmil.hierpool import (AttentionParams, RefinementConfig, Region, SlideBag,
                              attention_record, init_attention, instance_saliency, load_bag,
                              refine_value, refinement_score, region_encode, save_bag,
                              wsi_encode)

CFG = RefinementConfig(factor=10.0, threshold=0.2)


def make_region(embeddings, region_id="0", coord=(0, 0)):
    embeddings = np.asarray(embeddings, dtype=np.float64)
    return Region(region_id=region_id, coord=coord,
                  instance_coords=[(0, j) for j in range(embeddings.shape[0])],
                  embeddings=embeddings)


def make_bag(region_embs, label=0, slide_id="s"):
    regions = [make_region(e, region_id=str(m), coord=(0, m))
               for m, e in enumerate(region_embs)]
    return SlideBag(slide_id=slide_id, label=label, regions=regions)


def random_params(rng, hidden, dim):
    return AttentionParams(
        w_r=rng.standard_normal(hidden), v1=rng.standard_normal((hidden, dim)),
        v2=rng.standard_normal((hidden, dim)), w=rng.standard_normal(hidden),
        u1=rng.standard_normal((hidden, dim)), u2=rng.standard_normal((hidden, dim)))


# ---------------------------------------------------------------------------
# scalar brute-force oracle (pure python loops, no shared code with the tape)


def oracle_score(h, t, lam, alpha):
    num = sum(a * b for a, b in zip(h, t))
    nh = math.sqrt(sum(a * a for a in h))
    nt = math.sqrt(sum(b * b for b in t))
    c = num / (nh * nt)
    if c > alpha:
        return lam * c
    if c > 0.0:
        return c
    return 0.0


def oracle_gate(h, w, m1, m2):
    hidden = len(w)
    acc = 0.0
    for i in range(hidden):
        a = math.tanh(sum(m1[i][j] * h[j] for j in range(len(h))))
        b = 1.0 / (1.0 + math.exp(-sum(m2[i][j] * h[j] for j in range(len(h)))))
        acc += w[i] * a * b
    return acc


def oracle_region(embs, t, params, lam, alpha):
    logits = []
    for h in embs:
        s = oracle_score(h, t, lam, alpha) if t is not None else 0.0
        logits.append(oracle_gate(h, params.w_r.tolist(), params.v1.tolist(),
                                  params.v2.tolist()) + s)
    mx = max(logits)
    exps = [math.exp(x - mx) for x in logits]
    z = sum(exps)
    weights = [e / z for e in exps]
    emb = [sum(weights[j] * embs[j][i] for j in range(len(embs)))
           for i in range(len(embs[0]))]
    return emb, weights


def oracle_slide(region_embs, t, params, lam, alpha):
    regions = [oracle_region(e, t, params, lam, alpha) for e in region_embs]
    logits = []
    for emb, _ in regions:
        s = oracle_score(emb, t, lam, alpha) if t is not None else 0.0
        logits.append(oracle_gate(emb, params.w.tolist(), params.u1.tolist(),
                                  params.u2.tolist()) + s)
    mx = max(logits)
    exps = [math.exp(x - mx) for x in logits]
    z = sum(exps)
    weights = [e / z for e in exps]
    emb = [sum(weights[m] * regions[m][0][i] for m in range(len(regions)))
           for i in range(len(region_embs[0][0]))]
    return emb, weights


# ---------------------------------------------------------------------------
# refinement score branch table


@pytest.mark.parametrize("c,expected", [
    (0.5, 5.0),      # amplified branch: 10 * 0.5
    (0.1, 0.1),      # pass-through branch
    (-0.4, 0.0),     # suppressed
    (0.0, 0.0),      # boundary: non-positive
    (0.2, 0.2),      # boundary: threshold belongs to the pass-through branch
    (0.2000001, 2.000001),
])
def test_refine_value_branch_table(c, expected):
    s, _ = refine_value(c, CFG)
    assert s == pytest.approx(expected, rel=1e-12, abs=0.0 if expected else 1e-300)


def test_refine_value_slopes():
    assert refine_value(0.5, CFG) == (5.0, 10.0)
    assert refine_value(0.15, CFG) == (0.15, 1.0)
    assert refine_value(0.2, CFG) == (0.2, 1.0)
    assert refine_value(-0.2, CFG) == (0.0, 0.0)
    assert refine_value(0.0, CFG) == (0.0, 0.0)


def test_refinement_score_through_cosine():
    t = np.array([1.0, 0.0, 0.0, 0.0])
    h = np.array([0.5, math.sqrt(0.75), 0.0, 0.0])
    assert float(refinement_score(h, t, CFG)) == pytest.approx(5.0, abs=1e-9)
    h_mid = np.array([0.1, math.sqrt(0.99), 0.0, 0.0])
    assert float(refinement_score(h_mid, t, CFG)) == pytest.approx(0.1, abs=1e-9)
    h_neg = np.array([-0.4, math.sqrt(1 - 0.16), 0.0, 0.0])
    assert float(refinement_score(h_neg, t, CFG)) == 0.0


def test_refinement_degenerate_guidance_scores_zero():
    assert refinement_score(np.ones(3), None, CFG) == 0.0


def test_refinement_degenerate_instance_scores_zero():
    assert refinement_score(np.zeros(3), np.array([1.0, 0, 0]), CFG) == 0.0


def test_refinement_monotone_in_cosine():
    cs = np.linspace(-0.9, 0.9, 181)
    t = np.array([1.0, 0.0])
    vals = []
    for c in cs:
        h = np.array([c, math.sqrt(1 - c * c)])
        vals.append(float(refinement_score(h, t, CFG)))
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


def test_refinement_config_validation():
    with pytest.raises(ConfigError):
        RefinementConfig(factor=0.0)
    with pytest.raises(ConfigError):
        RefinementConfig(threshold=1.5)
    with pytest.raises(ConfigError):
        RefinementConfig(gradient="sideways")


# ---------------------------------------------------------------------------
# region encoder


def test_region_single_instance():
    rng = np.random.default_rng(0)
    h = rng.standard_normal(6)
    out = region_encode(make_region([h]), None, random_params(rng, 4, 6), CFG)
    assert np.array_equal(out.weight_values(), np.array([1.0]))
    assert np.abs(np.asarray(out.embedding) - h).max() <= 1e-15


def test_region_two_identical_instances():
    rng = np.random.default_rng(1)
    h = rng.standard_normal(6)
    t = tp.l2_normalize(rng.standard_normal(6))
    out = region_encode(make_region([h, h]), t, random_params(rng, 4, 6), CFG)
    assert np.abs(out.weight_values() - 0.5).max() <= 1e-15
    assert np.abs(np.asarray(out.embedding) - h).max() <= 1e-12


def test_region_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    embs = rng.standard_normal((3, 5))
    t = tp.l2_normalize(rng.standard_normal(5))
    params = random_params(rng, 4, 5)
    out = region_encode(make_region(embs), t, params, CFG)
    emb, weights = oracle_region(embs.tolist(), t.tolist(), params, CFG.factor, CFG.threshold)
    assert np.abs(out.weight_values() - np.array(weights)).max() <= 1e-12
    assert np.abs(np.asarray(out.embedding) - np.array(emb)).max() <= 1e-12


def test_region_rejects_empty():
    region = make_region(np.ones((1, 4)))
    region.embeddings = np.empty((0, 4))
    with pytest.raises(DataError):
        region_encode(region, None, random_params(np.random.default_rng(0), 2, 4), CFG)


# ---------------------------------------------------------------------------
# slide encoder


def test_wsi_single_region_passthrough():
    rng = np.random.default_rng(3)
    embs = rng.standard_normal((4, 6))
    t = tp.l2_normalize(rng.standard_normal(6))
    params = random_params(rng, 4, 6)
    bag = make_bag([embs])
    out = wsi_encode(bag, t, params, CFG)
    region = region_encode(bag.regions[0], t, params, CFG)
    assert np.array_equal(out.region_weight_values(), np.array([1.0]))
    assert np.abs(np.asarray(out.slide_embedding) - np.asarray(region.embedding)).max() <= 1e-15


def test_wsi_identical_regions_uniform():
    rng = np.random.default_rng(4)
    embs = rng.standard_normal((3, 6))
    t = tp.l2_normalize(rng.standard_normal(6))
    params = random_params(rng, 4, 6)
    out = wsi_encode(make_bag([embs, embs, embs]), t, params, CFG)
    assert np.abs(out.region_weight_values() - 1.0 / 3).max() <= 1e-12


def test_wsi_matches_scalar_oracle_full_chain():
    rng = np.random.default_rng(5)
    region_embs = [rng.standard_normal((2, 5)), rng.standard_normal((2, 5))]
    t = tp.l2_normalize(rng.standard_normal(5))
    params = random_params(rng, 3, 5)
    out = wsi_encode(make_bag(region_embs), t, params, CFG)
    emb, weights = oracle_slide([e.tolist() for e in region_embs], t.tolist(),
                                params, CFG.factor, CFG.threshold)
    assert np.abs(out.region_weight_values() - np.array(weights)).max() <= 1e-12
    assert np.abs(np.asarray(out.slide_embedding) - np.array(emb)).max() <= 1e-12


def test_wsi_rejects_empty_bag():
    bag = make_bag([np.ones((1, 4))])
    bag.regions = []
    with pytest.raises(DataError):
        wsi_encode(bag, None, random_params(np.random.default_rng(0), 2, 4), CFG)


# ---------------------------------------------------------------------------
# invariants


def test_weights_positive_and_sum_to_one():
    rng = np.random.default_rng(6)
    bag = make_bag([rng.standard_normal((5, 6)) for _ in range(3)])
    t = tp.l2_normalize(rng.standard_normal(6))
    out = wsi_encode(bag, t, random_params(rng, 4, 6), CFG)
    groups = [out.region_weight_values()] + [r.weight_values() for r in out.regions]
    for w in groups:
        assert (w > 0).all()
        assert abs(w.sum() - 1.0) <= 1e-12


def test_instance_permutation_equivariance():
    rng = np.random.default_rng(7)
    embs = rng.standard_normal((6, 5))
    t = tp.l2_normalize(rng.standard_normal(5))
    params = random_params(rng, 4, 5)
    base = region_encode(make_region(embs), t, params, CFG)
    perm = rng.permutation(6)
    perm_out = region_encode(make_region(embs[perm]), t, params, CFG)
    assert np.abs(perm_out.weight_values() - base.weight_values()[perm]).max() <= 1e-9
    assert np.abs(np.asarray(perm_out.embedding) - np.asarray(base.embedding)).max() <= 1e-9


def test_region_permutation_equivariance():
    rng = np.random.default_rng(8)
    region_embs = [rng.standard_normal((3, 5)) for _ in range(4)]
    t = tp.l2_normalize(rng.standard_normal(5))
    params = random_params(rng, 4, 5)
    base = wsi_encode(make_bag(region_embs), t, params, CFG)
    perm = [2, 0, 3, 1]
    perm_out = wsi_encode(make_bag([region_embs[i] for i in perm]), t, params, CFG)
    assert np.abs(perm_out.region_weight_values()
                  - base.region_weight_values()[perm]).max() <= 1e-9
    assert np.abs(np.asarray(perm_out.slide_embedding)
                  - np.asarray(base.slide_embedding)).max() <= 1e-9


def test_zero_guidance_reduces_to_plain_gated_attention():
    rng = np.random.default_rng(9)
    embs = rng.standard_normal((4, 6))
    params = random_params(rng, 4, 6)
    guided = region_encode(make_region(embs), None, params, CFG)
    # manual plain gated attention
    logits = np.array([params.w_r @ (np.tanh(params.v1 @ h) * (1 / (1 + np.exp(-params.v2 @ h))))
                       for h in embs])
    e = np.exp(logits - logits.max())
    weights = e / e.sum()
    assert np.abs(guided.weight_values() - weights).max() <= 1e-12


def test_refinement_increases_aligned_attention():
    rng = np.random.default_rng(10)
    t = tp.l2_normalize(rng.standard_normal(6))
    aligned = 0.9 * t + 0.05 * rng.standard_normal(6)
    others = rng.standard_normal((3, 6))
    embs = np.vstack([aligned, others])
    params = random_params(rng, 4, 6)
    assert tp.cosine(aligned, t) > CFG.threshold
    lo = region_encode(make_region(embs), t, params, CFG)
    hi_cfg = RefinementConfig(factor=3 * CFG.factor, threshold=CFG.threshold)
    hi = region_encode(make_region(embs), t, params, hi_cfg)
    assert hi.weight_values()[0] > lo.weight_values()[0]


@given(st.floats(0.21, 0.99), st.floats(1.1, 5.0))
def test_lambda_amplification_property(c, boost):
    rng = np.random.default_rng(11)
    t = np.array([1.0, 0.0, 0.0])
    h = np.array([c, math.sqrt(1 - c * c), 0.0])
    embs = np.vstack([h, rng.standard_normal((2, 3))])
    params = random_params(rng, 2, 3)
    base = region_encode(make_region(embs), t, params, CFG)
    boosted = region_encode(make_region(embs), t, params,
                            RefinementConfig(factor=CFG.factor * boost,
                                             threshold=CFG.threshold))
    assert boosted.weight_values()[0] > base.weight_values()[0]


# ---------------------------------------------------------------------------
# saliency and export


def test_saliency_single_instance_degenerate():
    rng = np.random.default_rng(12)
    bag = make_bag([rng.standard_normal((1, 4))])
    out = wsi_encode(bag, None, random_params(rng, 2, 4), CFG)
    sal = instance_saliency(out)
    assert sal[0][0] == 0.5


def test_saliency_uniform_attention_everywhere():
    rng = np.random.default_rng(13)
    h = rng.standard_normal(4)
    bag = make_bag([np.vstack([h, h]), np.vstack([h, h])])
    out = wsi_encode(bag, None, random_params(rng, 2, 4), CFG)
    for arr in instance_saliency(out):
        assert np.array_equal(arr, np.full_like(arr, 0.5))


def test_saliency_range_and_modes():
    rng = np.random.default_rng(14)
    bag = make_bag([rng.standard_normal((4, 5)) for _ in range(3)])
    t = tp.l2_normalize(rng.standard_normal(5))
    out = wsi_encode(bag, t, random_params(rng, 3, 5), CFG)
    for mode in ("multiplicative", "instance-only"):
        flat = np.concatenate(instance_saliency(out, mode))
        assert flat.min() >= 0.0 and flat.max() <= 1.0
        assert flat.min() == 0.0 and flat.max() == 1.0
    with pytest.raises(ConfigError):
        instance_saliency(out, "nonsense")


def test_saliency_planted_signal_above_background():
    # guidance aligned with the generator's planted prototype must push
    # signal instances above the background median, for any gate params
    from textmil.data import GeneratorSpec, build_dataset
    spec = GeneratorSpec(seed=5, dim=16, slides_per_class=4, noise_std=0.08,
                         regions_min=3, regions_max=3, instances_min=6, instances_max=6,
                         tumor_region_fraction=0.4, tumor_instance_fraction=0.5,
                         region_tokens=2, slide_tokens=2, test_per_class=1, val_per_class=1)
    ds = build_dataset(spec)
    guidance = ds.prototypes[1]
    rng = np.random.default_rng(0)
    params = random_params(rng, 4, 16)
    checked = 0
    for bag in ds.bags:
        truth = bag.flat_mask()
        if truth.sum() == 0:
            continue
        out = wsi_encode(bag, guidance, params, CFG)
        sal = np.concatenate(instance_saliency(out))
        assert sal[truth == 1].min() > np.median(sal[truth == 0])
        checked += 1
    assert checked == spec.slides_per_class


def test_attention_record_round_trip(tmp_path):
    rng = np.random.default_rng(15)
    bag = make_bag([rng.standard_normal((3, 5)) for _ in range(2)])
    t = tp.l2_normalize(rng.standard_normal(5))
    out = wsi_encode(bag, t, random_params(rng, 3, 5), CFG)
    record = attention_record(bag, out)
    # weights sum to one per softmax group
    assert sum(r["weight"] for r in record["regions"]) == pytest.approx(1.0, abs=1e-9)
    for r in record["regions"]:
        assert sum(i["weight"] for i in r["instances"]) == pytest.approx(1.0, abs=1e-9)
    # coordinates bijective with the bag
    rec_coords = {tuple(r["coord"]) for r in record["regions"]}
    assert rec_coords == {r.coord for r in bag.regions}
    for r, region in zip(record["regions"], bag.regions):
        assert [tuple(i["coord"]) for i in r["instances"]] == region.instance_coords
    # JSON round trip preserves the record exactly
    path = tmp_path / "attn.json"
    path.write_text(json.dumps(record, sort_keys=True))
    assert json.loads(path.read_text()) == json.loads(json.dumps(record, sort_keys=True))


# ---------------------------------------------------------------------------
# bag files


def test_bag_round_trip(tmp_path):
    rng = np.random.default_rng(16)
    bag = make_bag([rng.standard_normal((2, 4)) for _ in range(2)], label=1, slide_id="x1")
    bag.regions[0].mask = np.array([1, 0])
    bag.regions[1].mask = np.array([0, 0])
    save_bag(bag, tmp_path / "x1.json")
    loaded = load_bag(tmp_path / "x1.json")
    assert loaded.slide_id == "x1" and loaded.label == 1
    assert np.array_equal(loaded.regions[0].embeddings, bag.regions[0].embeddings)
    assert np.array_equal(loaded.flat_mask(), np.array([1, 0, 0, 0]))


def test_bag_validation_duplicate_coords(tmp_path):
    rng = np.random.default_rng(17)
    bag = make_bag([rng.standard_normal((2, 4))])
    bag.regions[0].instance_coords = [(0, 0), (0, 0)]
    save_bag(bag, tmp_path / "bad.json")
    with pytest.raises(DataError):
        load_bag(tmp_path / "bad.json")


def test_bag_validation_mask_alignment():
    rng = np.random.default_rng(18)
    bag = make_bag([rng.standard_normal((3, 4))])
    bag.regions[0].mask = np.array([1, 0])
    from textmil.hierpool import validate_bag
    with pytest.raises(DataError):
        validate_bag(bag)
