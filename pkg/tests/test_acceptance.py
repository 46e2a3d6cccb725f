"""Acceptance criteria 1-7. Each test prints one PASS/FAIL line with its measurements."""
import copy
import time

import cv2
import numpy as np
import pytest
import torch
import torch.nn.functional as F

from cmfd.backbone import (
    CorrelationBlock,
    SelfDeepMatcher,
    SpatialAttention,
    atrous_conv2d,
    l2_normalize_descriptors,
    self_correlation,
    top_t_pool,
    zero_out_normalize,
)
from cmfd.backbone.training import to_tensor
from cmfd.crf import CrfParams, energy, exact_infer_bruteforce, map_labels, meanfield_infer, unary_from_scores
from cmfd.fusion import integrate
from cmfd.metrics import image_level_metrics, pixel_metrics
from cmfd.pipeline import ProposalSuperGlue
from cmfd.proposals import select_proposals
from cmfd.synth import TransformRanges, build_dataset, procedural_corpus, synthesize_forgery
from crf_cases import instances, isolated_pixel_fixture
from test_proposals import random_instance, reference_algorithm


@pytest.fixture
def report(capsys):
    def emit(number, title, checks, elapsed, limit):
        ok = all(v for _, v in checks) and elapsed < limit
        failed = [name for name, v in checks if not v]
        if elapsed >= limit:
            failed.append(f"runtime {elapsed:.1f}s >= {limit}s")
        line = (f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {title} ({elapsed:.1f}s) "
                f"[{'; '.join(name for name, _ in checks)}]")
        if failed:
            line += " failed: " + "; ".join(failed)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return emit


def fiber(*values):
    return torch.tensor(values, dtype=torch.float64).reshape(1, -1, 1, 1)


def close(a, b, tol):
    if isinstance(a, torch.Tensor):
        a = a.detach().numpy()
    if isinstance(b, torch.Tensor):
        b = b.detach().numpy()
    return bool(np.all(np.abs(np.asarray(a, float) - np.asarray(b, float)) <= tol))


# -- 1 ------------------------------------------------------------------------------------

def test_criterion_1_numerical_kernels(report):
    t = time.perf_counter()
    impulse = np.zeros((5, 5))
    impulse[2, 2] = 1
    lattice = np.zeros((5, 5))
    lattice[::2, ::2] = 1
    checks = [
        ("atrous 1x1 filter", close(atrous_conv2d(np.ones((3, 3)), np.array([[2.0]]), rate=2), np.full((3, 3), 2), 0)),
        ("atrous impulse rate 2", close(atrous_conv2d(impulse, np.ones((3, 3)), rate=2), lattice, 0)),
        ("l2 3-4-5", close(l2_normalize_descriptors(fiber(3.0, 4.0)).flatten(), [0.6, 0.8], 1e-12)),
        ("top-T sort", top_t_pool(fiber(0.9, 0.1, 0.5, 0.3), 2).flatten().tolist() == [0.9, 0.5]),
        ("top-T full sort", top_t_pool(fiber(0.2, 0.7, -0.1, 0.3), 4).flatten().tolist() == [0.7, 0.3, 0.2, -0.1]),
        ("zero-out fiber", close(zero_out_normalize(fiber(0.9, 0.5)).flatten(), [0.874157, 0.485643], 1e-5)),
        ("zero-out negatives", zero_out_normalize(fiber(-1.0, -2.0)).flatten().tolist() == [0.0, 0.0]),
        ("fusion sigma(-2)", close(integrate(np.zeros((1, 1)), np.zeros((1, 1))), 0.119203, 1e-6)),
        ("fusion sigma(6)", close(integrate(np.ones((1, 1)), np.ones((1, 1))), 0.997527, 1e-6)),
    ]
    report(1, "numerical kernel suite", checks, time.perf_counter() - t, 10)


# -- 2 ------------------------------------------------------------------------------------

def _finite_difference_error(block, x, target, param, indices, eps=1e-6):
    def loss():
        return (block(x) * target).sum()

    block.zero_grad()
    loss().backward()
    analytic = param.grad.clone()
    worst = 0.0
    for idx in indices:
        with torch.no_grad():
            orig = param[idx].item()
            param[idx] = orig + eps
            up = loss().item()
            param[idx] = orig - eps
            down = loss().item()
            param[idx] = orig
        numeric = (up - down) / (2 * eps)
        worst = max(worst, abs(numeric - analytic[idx].item()) / max(abs(numeric), 1e-8))
    return worst


def test_criterion_2_attention_correlation_invariants(report):
    t = time.perf_counter()
    torch.manual_seed(0)
    att = SpatialAttention(16).double()
    x = torch.randn(2, 16, 5, 4, dtype=torch.float64)
    identity = torch.equal(att(x), x)
    rows = att.attention_weights(x).sum(-1)
    desc = l2_normalize_descriptors(torch.randn(1, 8, 5, 5, dtype=torch.float64))
    gram = self_correlation(desc)[0].reshape(25, 25)
    raw = torch.randn(1, 8, 5, 5, dtype=torch.float64)
    raw_gram = self_correlation(raw)[0].reshape(25, 25)
    norms = raw.reshape(8, 25).norm(dim=0)
    cauchy = bool(torch.all(raw_gram.abs() <= norms[:, None] * norms[None, :] + 1e-9))

    block = CorrelationBlock(8, T=6).double()
    with torch.no_grad():
        block.attention.lam.fill_(0.5)
    xin = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    target = torch.randn(1, 6, 4, 4, dtype=torch.float64)
    errs = [
        _finite_difference_error(block, xin, target, block.attention.query.weight, [(0, 0, 0, 0), (0, 5, 0, 0)]),
        _finite_difference_error(block, xin, target, block.attention.value.weight, [(1, 2, 0, 0), (7, 7, 0, 0)]),
        _finite_difference_error(block, xin, target, block.attention.lam, [(0,)]),
    ]
    checks = [
        ("lambda=0 identity", identity),
        ("softmax rows", close(rows, 1.0, 1e-6)),
        ("gram symmetry", close(gram, gram.T, 1e-6)),
        ("cauchy-schwarz", cauchy),
        (f"gradient rel err {max(errs):.2e} < 1e-4", max(errs) < 1e-4),
    ]
    report(2, "attention/correlation invariants", checks, time.perf_counter() - t, 60)


# -- 3 ------------------------------------------------------------------------------------

def test_criterion_3_algorithm1_oracle(report):
    t = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = post = slow_sweeps = 0
    for _ in range(1000):
        S, P = random_instance(rng)
        got, sweeps = select_proposals(S, P, return_sweeps=True)
        ref, _ = reference_algorithm(S.tolist(), [tuple(b) for b in P])
        mismatches += [tuple(b) for b in got] != ref
        post += any(b.area >= 0.5 * S.size for b in got)
        slow_sweeps += sweeps > max(len(P), 1)
    checks = [(f"{mismatches} mismatches", mismatches == 0), (f"{post} half-area violations", post == 0),
              (f"{slow_sweeps} instances over |P| sweeps", slow_sweeps == 0)]
    report(3, "proposal selection oracle equivalence on 1000 instances", checks, time.perf_counter() - t, 60)


# -- 4 ------------------------------------------------------------------------------------

def test_criterion_4_crf(report):
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    scores = rng.uniform(0.01, 0.99, (8, 9))
    img = rng.integers(0, 256, (8, 9, 3)).astype(np.uint8)
    u = unary_from_scores(scores)
    decoupled = np.array_equal(map_labels(meanfield_infer(u, img, CrfParams(w_appearance=0, w_smoothness=0))),
                               u[..., 1] < u[..., 0])
    worst, higher = 0.0, []
    cases = instances()
    for n, (u, img, p) in enumerate(cases):
        q = meanfield_infer(u, img, p)
        worst = max(worst, float(np.abs(q - exact_infer_bruteforce(u, img, p)[0]).max()))
        if energy(map_labels(q), u, img, p) > energy(u[..., 1] < u[..., 0], u, img, p) + 1e-12:
            higher.append(n)
    u, img, p = isolated_pixel_fixture()
    isolated = not map_labels(meanfield_infer(u, img, p)).any()
    checks = [
        ("decoupled equals unary argmax", decoupled),
        (f"max marginal error {worst:.4f} < 0.15 over {len(cases)} instances", worst < 0.15),
        (f"MAP energy <= unary-argmax energy (violated on instances {higher})", not higher),
        ("isolated pixel removed", isolated),
    ]
    report(4, "CRF correctness", checks, time.perf_counter() - t, 120)


# -- 5 ------------------------------------------------------------------------------------

EPOCHS = 16
BATCH = 4
LR = 1.0


def _easy_holdout(n=50, size=128, seed=99):
    corpus = procedural_corpus(25, size=size, seed=seed)
    images, masks, i = [], [], 0
    while len(images) < n:
        item = corpus[i % len(corpus)]
        region = item.regions[(i // len(corpus)) % len(item.regions)]
        try:
            s = synthesize_forgery(item.image, region, TransformRanges.easy(), seed=1000 + i, size=size)
        except Exception:  # noqa: BLE001 - unplaceable region, draw the next one
            i += 1
            continue
        images.append(s.image)
        masks.append(s.mask)
        i += 1
    return images, masks


def _mean_loss(net, images, masks, batch=BATCH):
    """Per-pixel cross-entropy with batch statistics, as seen during training."""
    net = copy.deepcopy(net).train()
    total = 0.0
    with torch.no_grad():
        for s in range(0, len(images), batch):
            x = to_tensor(images[s:s + batch])
            y = torch.from_numpy(np.stack(masks[s:s + batch]).astype(np.int64))
            total += F.cross_entropy(net(x), y, reduction="sum").item()
    return total / (len(images) * images[0].shape[0] * images[0].shape[1])


@pytest.mark.slow
def test_criterion_5_toy_learning(report, tmp_path):
    t = time.perf_counter()
    manifest = build_dataset(procedural_corpus(100, size=128, seed=11), 500, tmp_path / "train", seed=1,
                             ranges=TransformRanges.mild(), size=128)
    data = manifest.pairs()
    X, Y = map(list, zip(*(data[i] for i in range(len(data)))))
    Xt, Yt = _easy_holdout()
    est = SelfDeepMatcher(extractor="tiny", T=16, epochs=EPOCHS, batch_size=BATCH, lr=LR,
                          resize_range=(128, 128), random_state=0).initialize()
    probe = slice(0, 96)
    before = _mean_loss(est.net_, X[probe], Y[probe])
    est.set_params(warm_start=True).fit(X, Y)
    after = _mean_loss(est.net_, X[probe], Y[probe])
    f1 = float(np.mean([pixel_metrics(p, y).f1 for p, y in zip(est.predict(Xt), Yt)]))
    reduction = 1 - after / before
    checks = [(f"{len(X)} training samples", len(X) == 500),
              (f"held-out F1 {f1:.3f} >= 0.5", f1 >= 0.5),
              (f"loss {before:.4f} -> {after:.4f}, reduction {reduction:.1%} >= 50%", reduction >= 0.5)]
    report(5, "toy end-to-end learning", checks, time.perf_counter() - t, 1800)


# -- 6 ------------------------------------------------------------------------------------

def corrupt_scores(mask, rng, n_blobs=2, erosion=0.3):
    """Erode ``mask`` to 70% of its area and add disjoint false-positive discs."""
    m = mask.astype(np.uint8)
    target = (1 - erosion) * m.sum()
    kernel = np.ones((3, 3), np.uint8)
    while m.sum() > target:
        e = cv2.erode(m, kernel)
        if e.sum() < target:
            ring = np.argwhere((m > 0) & (e == 0))
            rng.shuffle(ring)
            for y, x in ring[:int(m.sum() - target)]:
                m[y, x] = 0
            break
        m = e
    out = m.astype(bool)
    h, w = mask.shape
    r = max(2, int(np.sqrt(mask.sum() / 2 / np.pi)))
    placed = 0
    for _ in range(10000):
        if placed == n_blobs:
            break
        cy, cx = rng.integers(r, h - r), rng.integers(r, w - r)
        disc = np.zeros_like(m)
        cv2.circle(disc, (int(cx), int(cy)), r, 1, -1)
        if (disc.astype(bool) & (mask | out)).any():
            continue
        out |= disc.astype(bool)
        placed += 1
    return np.where(out, 0.9, 0.1)


@pytest.mark.slow
def test_criterion_6_stage2_value(report):
    t = time.perf_counter()
    corpus = procedural_corpus(50, size=256, seed=5)
    refiner = ProposalSuperGlue().fit()
    before, after = [], []
    for i, item in enumerate(corpus):
        s = synthesize_forgery(item.image, item.regions[0], TransformRanges.mild(), seed=i, size=256)
        scores = corrupt_scores(s.mask, np.random.default_rng(i))
        before.append(pixel_metrics(scores > 0.5, s.mask).f1)
        after.append(pixel_metrics(refiner.refine(s.image, scores).mask, s.mask).f1)
    gain = float(np.mean(after) - np.mean(before))
    checks = [(f"{len(before)} samples", len(before) == 50),
              (f"F1 {np.mean(before):.3f} -> {np.mean(after):.3f}, gain {gain:+.3f} >= 0.05", gain >= 0.05)]
    report(6, "stage-2 value on corrupted score maps", checks, time.perf_counter() - t, 600)


# -- 7 ------------------------------------------------------------------------------------

def test_criterion_7_metrics(report):
    t = time.perf_counter()
    r = image_level_metrics([True] * 101 + [False] * 9 + [True] * 25 + [False] * 85,
                            [True] * 110 + [False] * 110)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 32, 2))
        m = pixel_metrics(rng.random(shape) < rng.random(), rng.random(shape) < rng.random())
        worst = max(worst, abs(m.f1 - 2 * m.iou / (1 + m.iou)))
    checks = [(f"TPR {r['tpr']:.4f}", round(r["tpr"], 4) == 0.9182),
              (f"FPR {r['fpr']:.4f}", round(r["fpr"], 4) == 0.2273),
              (f"F1 {r['f1']:.4f}", round(r["f1"], 4) == 0.8559),
              (f"F1-IoU identity max err {worst:.1e}", worst < 1e-12)]
    report(7, "metrics harness", checks, time.perf_counter() - t, 30)
