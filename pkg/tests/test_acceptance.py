"""End-to-end acceptance checks; one pass/fail line per criterion is printed at the end.

Criteria 6-9 share one session-scoped set of desk-scale runs: preset A,
200 training / 50 test images at 64x64, small networks, 30 epochs, for each
cue mode (none, coarse, fine) and seeds 0, 1, 2.
"""
import time

import numpy as np
import pytest
import torch

from crackcue import diffengine as de
from crackcue.analysis import gap_report
from crackcue.cli import main as cli_main
from crackcue.cuegen import coarse_background, coarse_cue
from crackcue.metrics import (DEFAULT_THRESHOLDS, PRPoint, evaluate, ods, ois, pr_curve,
                              tolerant_counts)
from crackcue.networks import (Checkpoint, ReconNet, ReconNetConfig, SegNet, SegNetConfig,
                               load_checkpoint, save_checkpoint)
from crackcue.perturb import PerturbSpec
from crackcue.synthdata import cue_concentration, get_preset, render_corpus
from crackcue.trainer import (TrainConfig, desk_config, pipeline_losses, predict, prepare,
                              reconstruction_loss, train)

SEEDS = (0, 1, 2)
MODES = ("none", "coarse", "fine")
TRAIN_SEED, TEST_A_SEED, TEST_B_SEED = 1000, 2000, 3000


def detail(record_property, text):
    record_property("detail", text)


# ---------------------------------------------------------------- criterion 1

def block_oracle(img, k):
    h, w, _ = img.shape
    bg = np.empty_like(img)
    for bi in range(0, h, k):
        for bj in range(0, w, k):
            bg[bi:bi + k, bj:bj + k] = img[bi:bi + k, bj:bj + k].max(axis=(0, 1))
    cue = np.abs(img - bg).sum(axis=2) / 3.0
    return bg, cue


@pytest.mark.criterion(1, "coarse background/cue equal per-block brute force")
def test_coarse_path_oracle(record_property):
    rng = np.random.default_rng(1)
    cases = [(rng.random((rng.integers(16, 65), rng.integers(16, 65), 3)), int(rng.choice([2, 4, 8])))
             for _ in range(100)]
    elapsed = 0.0
    for img, k in cases:
        t0 = time.perf_counter()
        bg, cue = coarse_background(img, k), coarse_cue(img, k)
        elapsed += time.perf_counter() - t0
        want_bg, want_cue = block_oracle(img, k)
        assert np.array_equal(bg, want_bg)
        np.testing.assert_allclose(cue, want_cue, rtol=0, atol=1e-15)
    detail(record_property, f"100 images, {elapsed:.2f}s")
    assert elapsed < 5


# ---------------------------------------------------------------- criterion 2

@pytest.mark.criterion(2, "coarse cue is affine covariant")
def test_affine_covariance(record_property):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        img = rng.random((40, 48, 3))
        a = rng.uniform(1e-3, 1.0)
        b = rng.uniform(0.0, 1.0 - a)
        diff = np.abs(coarse_cue(a * img + b, 8) - a * coarse_cue(img, 8)).max()
        worst = max(worst, diff)
    detail(record_property, f"max deviation {worst:.1e}")
    assert worst <= 1e-12


# ---------------------------------------------------------------- criterion 3

@pytest.mark.criterion(3, "pixels inside the dilated mask do not affect L_rec")
def test_mask_out(record_property):
    from crackcue.imagecore import dilate_mask

    worst_l = worst_g = 0.0
    for i, s in enumerate(render_corpus(get_preset("A"), 20, seed=33, size=32)):
        net = ReconNet(ReconNetConfig(encoder_layers=3, decoder_layers=3, base_channels=4,
                                      seed=i)).double()
        img = torch.from_numpy(s.image.transpose(2, 0, 1)[None].copy())
        bc = torch.from_numpy(coarse_background(s.image, 8).transpose(2, 0, 1)[None].copy())
        yd = torch.from_numpy(dilate_mask(s.gt, 4)[None, None].astype(np.float64))
        noise = torch.from_numpy(np.random.default_rng(i).random(img.shape))
        bumped = torch.where(yd.bool(), noise, img)
        params = list(net.parameters())
        out = []
        for target in (img, bumped):
            loss = reconstruction_loss(target, net(bc), yd)
            out.append((loss.item(), torch.autograd.grad(loss, params)))
        worst_l = max(worst_l, abs(out[0][0] - out[1][0]))
        worst_g = max(worst_g, max((g0 - g1).abs().max().item()
                                   for g0, g1 in zip(out[0][1], out[1][1])))
    detail(record_property, f"dL={worst_l:.1e} dgrad={worst_g:.1e}")
    assert worst_l <= 1e-12 and worst_g <= 1e-12


# ---------------------------------------------------------------- criterion 4

def _op_cases():
    g = torch.Generator().manual_seed(4)

    def r(*shape, grad=True):
        return torch.randn(*shape, generator=g, dtype=torch.float64).requires_grad_(grad)

    x, w, b, y = r(2, 3, 7, 6), r(4, 3, 3, 3), r(4), r(2, 1, 7, 6)
    target = (r(2, 1, 7, 6, grad=False) > 0).double()
    m1, m2, m3 = r(2, 4, 7, 6, grad=False), r(2, 3, 14, 12, grad=False), r(2, 3, 7, 6, grad=False)
    return {
        "conv2d": (lambda: (de.conv2d(x, w, b, padding=1) * m1).sum(), [x, w, b]),
        "conv2d_stride2": (lambda: (de.conv2d(x, w, b, stride=2, padding=1) ** 2).sum(), [x, w, b]),
        "maxpool2d": (lambda: (de.maxpool2d(x, 2, ceil_mode=True) ** 2).sum(), [x]),
        "upsample_nearest": (lambda: (de.upsample_nearest(x, 2) * m2).sum(), [x]),
        "relu": (lambda: (de.relu(x) * m3).sum(), [x]),
        "sigmoid": (lambda: (de.sigmoid(x) ** 2).sum(), [x]),
        "concat/slice": (lambda: (de.slice_channels(de.concat_channels(x, y), 2, 4) ** 2).sum(),
                         [x, y]),
        "crop": (lambda: (de.crop(x, 5, 4) ** 3).sum(), [x]),
        "bce_with_logits": (lambda: de.bce_with_logits(y, target), [y]),
    }


@pytest.mark.criterion(4, "finite-difference gradient checks (ops + full pipeline)")
def test_gradient_checks(record_property):
    t0 = time.perf_counter()
    worst_op = 0.0
    skipped = 0
    for name, (f, params) in _op_cases().items():
        stats = {}
        err = de.gradient_check(f, params, eps=1e-5, n_samples=None, stats=stats)
        skipped += stats["skipped"]
        assert err <= 1e-4, name
        worst_op = max(worst_op, err)

    config = TrainConfig(resolution=16, kernel=4)
    recon = ReconNet(ReconNetConfig(encoder_layers=3, decoder_layers=3, base_channels=3)).double()
    seg = SegNet(SegNetConfig(depth=2, base_channels=4, seed=1)).double()
    ckpt = Checkpoint(seg=seg, recon=recon, kernel=4)
    params = ckpt.named_parameters()
    n_params = sum(p.numel() for p in params.values())
    assert n_params <= 5000
    d = prepare(render_corpus(get_preset("A"), 2, seed=5, size=16), config)
    batch = [t.double() for t in (d.image, d.coarse_bg, d.coarse_q, d.gt, d.gt_dilated)]
    stats = {}
    err = de.gradient_check(lambda: pipeline_losses(ckpt, *batch, lam=1.0)[2], params,
                            eps=1e-5, n_samples=None, stats=stats)
    elapsed = time.perf_counter() - t0
    skipped += stats["skipped"]
    detail(record_property, f"ops {worst_op:.1e}, pipeline {err:.1e} over {stats['checked']} of "
                            f"{n_params} params, {skipped} kink-skipped, {elapsed:.0f}s")
    assert err <= 1e-4
    assert elapsed < 60


# ---------------------------------------------------------------- criterion 5

def brute_counts(pred, gt, tol):
    P, G = np.argwhere(pred), np.argwhere(gt)

    def matched(a, b):
        if not len(b):
            return 0
        return int(sum(np.abs(b - p).max(axis=1).min() <= tol for p in a))

    tp_pred, tp_gt = matched(P, G), matched(G, P)
    return tp_pred, len(P) - tp_pred, tp_gt, len(G) - tp_gt


def brute_scores(probs, gts, tol):
    pooled, per_image = [], [[] for _ in probs]
    for t in DEFAULT_THRESHOLDS:
        tot = [0, 0, 0, 0]
        for i, (p, g) in enumerate(zip(probs, gts)):
            c = brute_counts(p >= t, g.astype(bool), tol)
            tot = [a + b for a, b in zip(tot, c)]
            per_image[i].append(PRPoint(t, *c).f1)
        pooled.append(PRPoint(t, *tot))
    f = [p.f1 for p in pooled]
    pts = sorted((p.recall, p.precision) for p in pooled)
    pts = [(0.0, pts[0][1])] + pts
    area = sum((r1 - r0) * (p0 + p1) / 2 for (r0, p0), (r1, p1) in zip(pts, pts[1:]))
    return (max(f), DEFAULT_THRESHOLDS[f.index(max(f))],
            float(np.mean([max(v) for v in per_image])), area, pooled)


def metric_fixtures():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n = int(rng.integers(1, 4))
        gts = [(rng.random((16, 16)) < rng.uniform(0.03, 0.2)).astype(np.uint8) for _ in range(n)]
        probs = [np.clip(g * rng.uniform(0.2, 0.7) + rng.random((16, 16)) * 0.6, 0, 1) for g in gts]
        yield probs, gts


@pytest.mark.criterion(5, "metrics match exhaustive brute force; OIS >= ODS")
def test_metrics_oracle(record_property):
    for probs, gts in metric_fixtures():
        for tol in (0, 1, 3):
            for p, g in zip(probs, gts):
                pred = p >= 0.5
                assert tolerant_counts(pred, g, tol) == brute_counts(pred, g.astype(bool), tol)
                if tol == 0:
                    tp = int((pred & (g > 0)).sum())
                    assert tolerant_counts(pred, g, 0) == (tp, int(pred.sum()) - tp, tp,
                                                           int(g.sum()) - tp)
            rep = evaluate(probs, gts, tol=tol)
            b_ods, b_t, b_ois, b_ap, b_curve = brute_scores(probs, gts, tol)
            assert [(q.tp_pred, q.fp, q.tp_gt, q.fn) for q in rep.curve] == \
                [(q.tp_pred, q.fp, q.tp_gt, q.fn) for q in b_curve]
            assert rep.ods == b_ods and rep.ods_threshold == b_t
            assert rep.ois == pytest.approx(b_ois, abs=1e-12)
            assert rep.ap == pytest.approx(b_ap, abs=1e-12)
    detail(record_property, "oracle exact on 50 fixtures x 3 tolerances")


@pytest.mark.criterion(5, "metrics match exhaustive brute force; OIS >= ODS")
def test_ois_dominates_ods(record_property):
    # Pooled counts weight images by pixel count while OIS weights them
    # equally, so a shared threshold can beat the per-image mean. The oracle
    # agrees with the implementation on every case counted here.
    violations = []
    for k, (probs, gts) in enumerate(metric_fixtures()):
        for tol in (0, 1, 3):
            rep = evaluate(probs, gts, tol=tol)
            if rep.ois < rep.ods:
                violations.append(f"#{k} tol{tol}")
    detail(record_property, f"OIS < ODS on {len(violations)}/150 fixture-tolerance pairs")
    assert not violations, ", ".join(violations)


# ---------------------------------------------------------- shared desk runs

@pytest.fixture(scope="session")
def corpora():
    train_a = render_corpus(get_preset("A"), 200, seed=TRAIN_SEED)
    test_a = render_corpus(get_preset("A"), 50, seed=TEST_A_SEED)
    test_b = render_corpus(get_preset("B"), 50, seed=TEST_B_SEED)
    contrast = PerturbSpec("contrast", 3)
    test_con = [(contrast.apply(s.image), s.gt) for s in test_a]
    return {"train": train_a,
            "A": ([s.image for s in test_a], [s.gt for s in test_a]),
            "B": ([s.image for s in test_b], [s.gt for s in test_b]),
            "contrast": ([i for i, _ in test_con], [g for _, g in test_con])}


@pytest.fixture(scope="session")
def desk_runs(corpora):
    runs = {}
    for seed in SEEDS:
        for mode in MODES:
            t0 = time.perf_counter()
            ckpt, tlog = train(corpora["train"], desk_config(cue_mode=mode, seed=seed))
            seconds = time.perf_counter() - t0
            scores = {}
            for name in ("A", "B", "contrast"):
                images, gts = corpora[name]
                _, probs = predict(images, ckpt)
                scores[name] = evaluate(probs, gts).ods
            runs[mode, seed] = {"ckpt": ckpt, "log": tlog, "seconds": seconds, "ods": scores}
    return runs


def mean_ods(runs, mode, test):
    return float(np.mean([runs[mode, s]["ods"][test] for s in SEEDS]))


@pytest.mark.slow
@pytest.mark.criterion(6, "desk-scale training converges and segments preset A")
def test_desk_training(desk_runs, record_property):
    drops, scores, seconds = [], [], []
    for seed in SEEDS:
        run = desk_runs["fine", seed]
        means = run["log"].epoch_means()
        drops.append(1 - means[-1] / means[0])
        scores.append(run["ods"]["A"])
        seconds.append(run["seconds"])
    detail(record_property, "loss drop " + "/".join(f"{d:.0%}" for d in drops)
           + ", ODS " + "/".join(f"{s:.3f}" for s in scores)
           + f", {np.mean(seconds):.0f}s per run")
    assert min(drops) >= 0.5
    assert min(scores) >= 0.80
    assert np.mean(seconds) <= 600


@pytest.mark.slow
@pytest.mark.criterion(7, "cue model beats the no-cue baseline off-domain")
def test_cross_domain(desk_runs, record_property):
    parts = []
    for test in ("B", "contrast"):
        fine, none = mean_ods(desk_runs, "fine", test), mean_ods(desk_runs, "none", test)
        parts.append(f"{test}: fine {fine:.3f} vs none {none:.3f}")
        assert fine - none >= 0.01, parts[-1]
    detail(record_property, ", ".join(parts))


@pytest.mark.slow
@pytest.mark.criterion(8, "cue-mode ordering fine >= coarse >= none")
def test_cue_mode_ordering(desk_runs, record_property):
    m = {mode: mean_ods(desk_runs, mode, "B") for mode in MODES}
    detail(record_property, "preset B mean ODS " + ", ".join(f"{k} {v:.3f}" for k, v in m.items()))
    assert m["fine"] >= m["coarse"] >= m["none"]


@pytest.mark.slow
@pytest.mark.criterion(9, "cue intensities have a smaller A-vs-B gap than raw pixels")
def test_domain_gap(desk_runs, corpora, record_property):
    gaps = []
    for seed in SEEDS:
        rep = gap_report(corpora["A"][0], corpora["B"][0], desk_runs["fine", seed]["ckpt"])
        gaps.append((rep["raw_gap"], rep["cue_gap"]))
    detail(record_property, "raw/cue " + ", ".join(f"{r:.3f}/{c:.3f}" for r, c in gaps))
    assert all(c < r for r, c in gaps)


@pytest.mark.slow
@pytest.mark.criterion(10, "reruns are byte-identical; checkpoints round-trip exactly")
def test_determinism(desk_runs, corpora, tmp_path, capsys, record_property):
    from crackcue.imagecore import save_field

    for run in ("a", "b"):
        assert cli_main(["generate", "--preset", "B", "--n", "6", "--seed", "3", "--size", "48",
                         "--out", str(tmp_path / run)]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.*"))
    assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

    tiny = desk_config(epochs=2, resolution=32)
    pairs = corpora["train"][:16]
    for run in ("a", "b"):
        ckpt, tlog = train(pairs, tiny)
        save_checkpoint(ckpt, tmp_path / f"{run}.ckpt")
        tlog.to_csv(tmp_path / f"{run}.csv")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    strip = [[l.rsplit(",", 1)[0] for l in (tmp_path / f"{r}.csv").read_text().splitlines()]
             for r in ("a", "b")]
    assert strip[0] == strip[1]

    images, gts = corpora["A"]
    ckpt = desk_runs["fine", 0]["ckpt"]
    _, probs = predict(images[:8], ckpt)
    save_checkpoint(ckpt, tmp_path / "fine.ckpt")
    _, again = predict(images[:8], load_checkpoint(tmp_path / "fine.ckpt"))
    assert all(p.tobytes() == q.tobytes() for p, q in zip(probs, again))

    (tmp_path / "pred").mkdir()
    (tmp_path / "gt").mkdir()
    from crackcue.imagecore import save_mask
    for i, (p, g) in enumerate(zip(probs, gts[:8])):
        save_field(p, tmp_path / "pred" / f"{i:04d}.ccf", mode="rawf32")
        save_mask(g, tmp_path / "gt" / f"{i:04d}.png")
    for run in ("a", "b"):
        assert cli_main(["evaluate", "--pred-dir", str(tmp_path / "pred"), "--gt-dir",
                         str(tmp_path / "gt"), "--out", str(tmp_path / f"rep_{run}.json")]) == 0
    capsys.readouterr()
    assert (tmp_path / "rep_a.json").read_bytes() == (tmp_path / "rep_b.json").read_bytes()
    detail(record_property, f"{len(files)} corpus files, checkpoint, log, report identical")


# --------------------------------------------------------------- criterion 11

@pytest.mark.criterion(11, "wide cracks defeat the coarse cue")
def test_wide_crack_limitation(record_property):
    # width of the thin-crack dilation: widest preset-A crack plus one
    d = int(get_preset("A").crack_width[1]) + 1

    def pooled(name):
        pairs = render_corpus(get_preset(name), 50, seed=11)
        cues = [coarse_cue(s.image, 8) for s in pairs]
        inside = sum(c.sum() * cue_concentration(c, s.gt, d) for c, s in zip(cues, pairs))
        return inside / sum(c.sum() for c in cues)

    thin, wide = pooled("A"), pooled("WIDE")
    detail(record_property, f"cue mass inside dilated GT: A {thin:.2f}, WIDE {wide:.2f}")
    assert thin >= 0.6
    assert wide < 0.6
