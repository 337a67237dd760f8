"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The directional-replication criteria (8 and 9) train 9 small models and are
the slow part of the suite; their shared runs are built once in a
session fixture. Thresholds and tolerances are stated inline with each
criterion.
"""

import time

import numpy as np
import pytest

from mplbench import autodiff as ad
from mplbench.autodiff import Tensor
from mplbench.corpus import CorpusSpec, generate_corpus
from mplbench.encoder import EncoderConfig, encode, init_encoder
from mplbench.labeler import build_ca1, build_ca2, kmeans
from mplbench.masking import MaskPolicy, MaskSet, sample_mask
from mplbench.objective import (init_heads, loc_to_layer, plan_single,
                                plan_triple, total_loss)
from mplbench.pretrain import (TrainConfig, load_checkpoint, pretrain,
                               save_checkpoint)
from mplbench.probe import (ProbeConfig, ProbeTask, param_digest, train_probe,
                            weight_center_of_mass, weight_entropy)
from mplbench.report import render_heatmap_svg, read_weights_csv, write_weights_csv

SIZES = [64, 48, 32]
REPLICATION_SEEDS = (0, 1, 2)
PRETRAIN_STEPS = 2000
PROBE_STEPS = 800


def report(criterion, ok, detail=""):
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# --- criterion 1: gradient correctness ------------------------------------

def test_criterion_1_gradient_correctness():
    t0 = time.time()
    rng = np.random.default_rng(0)

    def t(shape, seed):
        return Tensor(np.random.default_rng(seed).uniform(-2, 2, size=shape),
                      requires_grad=True)

    worst_prim = 0.0
    cases = {
        "matmul": ([(3, 4), (4, 2)], lambda a, b: ad.matmul(a, b)),
        "add": ([(3, 4), (3, 4)], lambda a, b: ad.add(a, b)),
        "add_rowvec": ([(3, 4), (4,)], lambda a, b: ad.add(a, b)),
        "mul": ([(3, 4), (3, 4)], lambda a, b: ad.mul(a, b)),
        "layer_norm": ([(4, 6), (6,), (6,)], lambda x, g, b: ad.layer_norm(x, g, b)),
        "softmax": ([(3, 5)], lambda x: ad.softmax(x)),
        "gelu": ([(3, 5)], lambda x: ad.gelu(x)),
        "embedding": ([(5, 3)], lambda t_: ad.embedding(t_, [0, 2, 2, 4])),
        "mean": ([(5, 3)], lambda x: ad.mean(x, axis=0)),
        "sdpa": ([(4, 4), (4, 4), (4, 4)], lambda q, k, v: ad.sdpa(q, k, v)),
        "cross_entropy": ([(4, 6)], lambda x: ad.cross_entropy(x, [0, 5, 2, 3])),
    }
    for i, (name, (shapes, fn)) in enumerate(cases.items()):
        params = [t(s, 100 + 10 * i + j) for j, s in enumerate(shapes)]
        out = fn(*params)
        if out.data.ndim == 0:
            err = ad.grad_check(lambda: fn(*params), params)
        else:
            err = ad.grad_check(lambda: ad.sum_all(ad.mul(fn(*params), fn(*params))),
                                params)
        assert err < 1e-4, f"primitive {name}: {err}"
        worst_prim = max(worst_prim, err)

    cfg = EncoderConfig(num_layers=3, model_dim=8, num_heads=2, ffn_dim=12,
                        input_dim=5, max_frames=10, seed=0)
    model = init_encoder(cfg)
    plan = plan_triple(0.34, 3, [7, 5, 3])
    heads = init_heads(plan, 8, 1)
    utts = [rng.normal(size=(6, 5)), rng.normal(size=(8, 5))]
    masks = [MaskSet(np.array([1, 2, 5])), MaskSet(np.array([0, 3, 4, 7]))]
    labels = [{s: rng.integers(0, s, size=u.shape[0]) for s in (7, 5, 3)}
              for u in utts]
    params = dict(model.params)
    params.update(heads)

    def full():
        total = None
        for u, m, lab in zip(utts, masks, labels):
            acts = encode(model, u, m)
            l, _ = total_loss(plan, acts, heads, lab, m)
            total = l if total is None else ad.add(total, l)
        return ad.smul(total, 0.5)

    # eps 1e-4 balances truncation against float64 roundoff for near-zero
    # coordinates of the deep composite
    err_full = ad.grad_check(full, params, eps=1e-4)
    elapsed = time.time() - t0
    report(1, err_full < 1e-3 and worst_prim < 1e-4 and elapsed < 60,
           f"primitives max err {worst_prim:.2e} (<1e-4), full model "
           f"{err_full:.2e} (<1e-3), {elapsed:.1f}s (<60s)")


# --- criterion 2: loss structure -------------------------------------------

def test_criterion_2_loss_structure():
    rng = np.random.default_rng(1)
    worst_rel = 0.0
    locality_ok = True
    for _ in range(100):
        t = int(rng.integers(6, 24))
        d = int(rng.integers(4, 12))
        l_count = int(rng.integers(3, 7))
        acts = [Tensor(rng.normal(size=(t, d))) for _ in range(l_count + 1)]
        n_place = 3
        layers = np.sort(rng.choice(np.arange(1, l_count + 1), size=n_place,
                                    replace=False))
        sizes = np.sort(rng.choice(np.arange(3, 40), size=n_place,
                                   replace=False))[::-1]
        heads = {}
        labels = {}
        for s in sizes:
            heads[f"head_k{s}.w"] = Tensor(rng.normal(size=(d, s)))
            heads[f"head_k{s}.b"] = Tensor(rng.normal(size=s))
            labels[int(s)] = rng.integers(0, s, size=t)
        mask = MaskSet(np.sort(rng.choice(t, size=int(rng.integers(1, t)),
                                          replace=False)))

        from mplbench.objective import Placement, PlacementPlan
        plan = PlacementPlan(
            placements=tuple(Placement(loc=int(l) / l_count, layer=int(l),
                                       codebook_size=int(s))
                             for l, s in zip(layers, sizes)),
            mode="triple")
        total, breakdown = total_loss(plan, acts, heads, labels, mask)
        s = sum(breakdown.values())
        worst_rel = max(worst_rel, abs(total.item() - s) / max(abs(s), 1e-300))

        # mask locality: perturb labels at unmasked frames only
        perturbed = {k: v.copy() for k, v in labels.items()}
        unmasked = sorted(set(range(t)) - set(mask.indices.tolist()))
        for k in perturbed:
            for i in unmasked:
                perturbed[k][i] = (perturbed[k][i] + 1) % k
        total2, _ = total_loss(plan, acts, heads, perturbed, mask)
        locality_ok = locality_ok and (total.item() == total2.item())
    report(2, worst_rel < 1e-12 and locality_ok,
           f"additivity max rel err {worst_rel:.2e} (<1e-12), "
           f"unmasked-label perturbation bit-identical: {locality_ok}")


# --- criterion 3: placement semantics --------------------------------------

def test_criterion_3_placement_semantics():
    ok = loc_to_layer(0.4, 10) == 4 and loc_to_layer(0.6, 10) == 6
    plan = plan_triple(0.4, 10, [500, 250, 100])
    layout = [(p.codebook_size, p.layer) for p in plan.placements]
    ok = ok and layout == [(500, 4), (250, 7), (100, 10)]
    sizes = [p.codebook_size for p in plan.placements]
    ok = ok and all(b < a for a, b in zip(sizes, sizes[1:]))
    report(3, ok, f"(0.4,10)->4, (0.6,10)->6, plan {layout}")


# --- criterion 4: clustering ------------------------------------------------

def test_criterion_4_clustering():
    rng = np.random.default_rng(2)
    monotone = True
    for seed in range(50):
        points = rng.normal(size=(80, 4))
        cb = kmeans(points, 6, seed=seed)
        h = cb.distortion_history
        monotone = monotone and all(b <= a + 1e-9 for a, b in zip(h, h[1:]))

    # CA2 hierarchy on separated blobs: total and surjective
    centers = 10.0 * np.eye(8)[:, :4].repeat(2, axis=1)[:, :4]
    centers = np.vstack([10.0 * np.array([np.cos(2 * np.pi * i / 8),
                                          np.sin(2 * np.pi * i / 8), 0, 0])
                         for i in range(8)])
    points = np.concatenate([c + 0.2 * rng.normal(size=(25, 4)) for c in centers])

    class FakeUtt:
        def __init__(self, feats):
            self.features = feats
            self.utterance_id = "u0"

    class FakeCorpus:
        splits = {"train": [FakeUtt(points)], "dev": [], "test": []}

    bundle = build_ca2(FakeCorpus(), [8, 4], 1.0, seed=3)
    hmap = bundle.hierarchy_maps[(8, 4)]
    hierarchy_ok = hmap.shape == (8,) and set(hmap.tolist()) == set(range(4))

    # K=1 returns the global mean for both strategies at subset_frac=1
    b1 = build_ca1(FakeCorpus(), [1], 1.0, seed=4)
    b2 = build_ca2(FakeCorpus(), [1], 1.0, seed=4)
    mean = points.mean(axis=0)
    mean_ok = (np.abs(b1.codebooks[0].centroids[0] - mean).max() < 1e-12 and
               np.abs(b2.codebooks[0].centroids[0] - mean).max() < 1e-12)
    report(4, monotone and hierarchy_ok and mean_ok,
           f"Lloyd monotone over 50 runs: {monotone}, hierarchy total+surjective: "
           f"{hierarchy_ok}, K=1 global mean (1e-12): {mean_ok}")


# --- criterion 5: masking statistics ----------------------------------------

def test_criterion_5_masking_statistics():
    policy = MaskPolicy(start_prob=0.08, span_length=10, require_nonempty=False)
    rng = np.random.default_rng(5)
    mean_frac = np.mean([len(sample_mask(1000, policy, rng)) / 1000
                         for _ in range(1000)])
    expect = 1.0 - (1.0 - 0.08) ** 10
    ok = abs(mean_frac - expect) < 0.05
    report(5, ok, f"mean masked fraction {mean_frac:.4f} vs closed form "
                  f"{expect:.4f} (tol 0.05)")


# --- shared desk-scale runs for criteria 6, 8, 9 ----------------------------

ENC = dict(num_layers=6, model_dim=32, num_heads=4, ffn_dim=64)


def desk_run(seed, plan_kind, steps=PRETRAIN_STEPS):
    spec = CorpusSpec(seed=seed)
    corpus = generate_corpus(spec)
    bundle = build_ca1(corpus, SIZES, 0.5, seed)
    enc = EncoderConfig(input_dim=spec.feature_dim, max_frames=spec.max_frames(),
                        seed=seed, **ENC)
    tc = TrainConfig(steps=steps, warmup_steps=steps // 10, log_every=1, seed=seed)
    if plan_kind == "single":
        plan = plan_single(enc.num_layers, min(SIZES))
    else:
        plan = plan_triple(float(plan_kind), enc.num_layers, SIZES)
    state, log = pretrain(corpus, bundle, enc, plan, tc)
    return corpus, state, log


def probe_run(corpus, state, seed):
    pcfg = ProbeConfig(steps=PROBE_STEPS, learning_rate=5e-3, seed=seed)
    rc = train_probe(state.model(), ProbeTask("frame_content",
                                              corpus.spec.num_content_units),
                     corpus, pcfg)
    rs = train_probe(state.model(), ProbeTask("utterance_speaker",
                                              corpus.spec.num_speakers),
                     corpus, pcfg)
    return rc, rs


@pytest.fixture(scope="session")
def replication_runs():
    """content/speaker probe summaries for {single, 0.33, 0.66} x 3 seeds."""
    out = {}
    for seed in REPLICATION_SEEDS:
        for kind in ("single", "0.33", "0.66"):
            corpus, state, _ = desk_run(seed, kind)
            rc, rs = probe_run(corpus, state, seed)
            out[(seed, kind)] = {
                "content_acc": rc.metric,
                "content_entropy": weight_entropy(rc.layer_weights),
                "content_com": weight_center_of_mass(rc.layer_weights),
                "speaker_com": weight_center_of_mass(rs.layer_weights),
            }
    return out


# --- criterion 6: training sanity -------------------------------------------

def test_criterion_6_training_sanity(tmp_path):
    t0 = time.time()
    seed = 0
    spec = CorpusSpec(seed=seed)
    corpus = generate_corpus(spec)
    bundle = build_ca1(corpus, SIZES, 0.5, seed)
    enc = EncoderConfig(input_dim=spec.feature_dim, max_frames=spec.max_frames(),
                        seed=seed, **ENC)
    plan = plan_single(enc.num_layers, min(SIZES))
    tc = TrainConfig(steps=2000, warmup_steps=200, log_every=1, seed=seed)
    state, log = pretrain(corpus, bundle, enc, plan, tc)
    first = np.mean([r["total"] for r in log[:100]])
    last = np.mean([r["total"] for r in log[-100:]])
    elapsed = time.time() - t0

    # midpoint resume reproduces the uninterrupted run bit-exactly
    tc_half = TrainConfig(steps=1000, warmup_steps=200, log_every=1, seed=seed)
    s_half, _ = pretrain(corpus, bundle, enc, plan, tc_half)
    ckpt = tmp_path / "mid.mplc"
    save_checkpoint(s_half, ckpt)
    s_resumed, _ = pretrain(corpus, bundle, enc, plan, tc,
                            state=load_checkpoint(ckpt))
    resume_ok = all(np.array_equal(state.params[n].data, s_resumed.params[n].data)
                    for n in state.params)
    report(6, last < 0.6 * first and elapsed < 600 and resume_ok,
           f"loss {first:.3f} -> {last:.3f} (ratio {last / first:.3f} < 0.6), "
           f"{elapsed:.0f}s (<600s), midpoint resume bit-exact: {resume_ok}")


# --- criterion 7: probe contracts -------------------------------------------

def test_criterion_7_probe_contracts():
    spec = CorpusSpec(num_utterances=(30, 8, 8), seed=17)
    corpus = generate_corpus(spec)
    enc = EncoderConfig(num_layers=3, model_dim=16, num_heads=2, ffn_dim=32,
                        input_dim=spec.feature_dim, max_frames=spec.max_frames(),
                        seed=17)
    model = init_encoder(enc)
    digest_before = param_digest(model.params)

    # simplex at every step: instrument the weighted-sum path
    from mplbench import probe as probe_mod
    simplex_ok = []
    orig = probe_mod._weighted_feature

    def spy(xs_t, w_logits, pin_layer):
        feat, w = orig(xs_t, w_logits, pin_layer)
        simplex_ok.append(bool(np.all(np.asarray(w) >= 0)
                               and abs(np.sum(w) - 1.0) < 1e-9))
        return feat, w

    probe_mod._weighted_feature = spy
    try:
        train_probe(model, ProbeTask("frame_content", spec.num_content_units),
                    corpus, ProbeConfig(steps=40, seed=18))
    finally:
        probe_mod._weighted_feature = orig
    digest_ok = param_digest(model.params) == digest_before

    # pinned probe matches an independently trained single-layer probe
    k = 1
    cfg = ProbeConfig(steps=30, seed=19, pin_layer=k, log_every=1)
    from mplbench.probe import extract_features
    r = train_probe(model, ProbeTask("frame_content", spec.num_content_units),
                    corpus, cfg)
    x = np.concatenate([extract_features(model, u)[k]
                        for u in corpus.splits["train"]])
    y = np.concatenate([u.content_labels for u in corpus.splits["train"]])
    rng = np.random.default_rng(cfg.seed)
    w = rng.normal(0.0, 0.02, size=(x.shape[1], spec.num_content_units))
    b = np.zeros(spec.num_content_units)
    mw, vw = np.zeros_like(w), np.zeros_like(w)
    mb, vb = np.zeros_like(b), np.zeros_like(b)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    max_diff = 0.0
    for t, (_, probe_loss) in zip(range(1, cfg.steps + 1), r.loss_log):
        logits = x @ w + b
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        loss = float((np.log(np.exp(z).sum(axis=1))
                      - z[np.arange(len(y)), y]).mean())
        max_diff = max(max_diff, abs(loss - probe_loss))
        g = p
        g[np.arange(len(y)), y] -= 1.0
        g /= len(y)
        gw, gb = x.T @ g, g.sum(axis=0)
        mw = b1 * mw + (1 - b1) * gw
        vw = b2 * vw + (1 - b2) * gw * gw
        mb = b1 * mb + (1 - b1) * gb
        vb = b2 * vb + (1 - b2) * gb * gb
        w -= cfg.learning_rate * (mw / (1 - b1 ** t)) / (np.sqrt(vw / (1 - b2 ** t)) + cfg.adam_eps)
        b -= cfg.learning_rate * (mb / (1 - b1 ** t)) / (np.sqrt(vb / (1 - b2 ** t)) + cfg.adam_eps)
    report(7, all(simplex_ok) and digest_ok and max_diff < 1e-9,
           f"simplex at every step: {all(simplex_ok)}, digest unchanged: {digest_ok}, "
           f"pinned vs single-layer max loss diff {max_diff:.2e} (<1e-9)")


# --- criteria 8 + 9: directional replication --------------------------------

def test_criterion_8_directional_replication(replication_runs):
    t0 = time.time()
    acc_wins = sum(
        1 for s in REPLICATION_SEEDS
        if replication_runs[(s, "0.33")]["content_acc"]
        >= replication_runs[(s, "single")]["content_acc"])
    com_wins = sum(
        1 for s in REPLICATION_SEEDS
        if replication_runs[(s, "0.33")]["speaker_com"]
        < replication_runs[(s, "single")]["speaker_com"])
    ent_wins = sum(
        1 for s in REPLICATION_SEEDS
        if replication_runs[(s, "0.33")]["content_entropy"]
        > replication_runs[(s, "single")]["content_entropy"])
    detail = (f"content acc B>=A in {acc_wins}/3, speaker CoM B<A in "
              f"{com_wins}/3, content entropy B>A in {ent_wins}/3")
    report(8, acc_wins >= 2 and com_wins >= 2 and ent_wins >= 2, detail)


def test_criterion_9_placement_shift_monotonicity(replication_runs):
    wins = sum(
        1 for s in REPLICATION_SEEDS
        if replication_runs[(s, "0.66")]["content_com"]
        > replication_runs[(s, "0.33")]["content_com"])
    report(9, wins >= 2, f"content CoM(0.66) > CoM(0.33) in {wins}/3 seed-pairs")


# --- criterion 10: reporting fidelity ----------------------------------------

def test_criterion_10_reporting_fidelity(tmp_path):
    rng = np.random.default_rng(10)
    w1 = rng.random(7)
    w1 /= w1.sum()
    w2 = rng.random(7)
    w2 /= w2.sum()
    results = [
        {"task": "frame_content", "metric": 0.8, "layer_weights": w1.tolist()},
        {"task": "utterance_speaker", "metric": 0.9, "layer_weights": w2.tolist()},
    ]
    csv_path = tmp_path / "weights.csv"
    write_weights_csv(results, csv_path)
    back = read_weights_csv(csv_path)
    roundtrip_ok = (np.abs(back[0][1] - w1).max() < 1e-12 and
                    np.abs(back[1][1] - w2).max() < 1e-12)

    svg_path = tmp_path / "heatmap.svg"
    render_heatmap_svg(results, svg_path)
    cells = svg_path.read_text().count('class="cell"')
    cells_ok = cells == 2 * 7

    import json
    import os
    from mplbench.report import compare
    for name in ("a", "b"):
        os.makedirs(tmp_path / name / "probes")
        for r in results:
            with open(tmp_path / name / "probes" / f"{r['task']}.json", "w") as f:
                json.dump(r, f)
    rep = compare(str(tmp_path / "a"), str(tmp_path / "b"))
    deltas = [rep.content_accuracy.delta, rep.speaker_accuracy.delta,
              rep.speaker_center_of_mass.delta, rep.content_entropy.delta]
    zero_ok = all(d == 0.0 for d in deltas)
    report(10, roundtrip_ok and cells_ok and zero_ok,
           f"csv roundtrip 1e-12: {roundtrip_ok}, heatmap cells {cells} == "
           f"tasks x (L+1) = 14, identical-run deltas all zero: {zero_ok}")
