"""Acceptance gate: eleven end-to-end criteria, one test (and one verdict line) each.

Each test prints a ``criterion N: PASS`` line with the measured quantity once its
assertions hold, so a verbose run reads as a checklist.  The two training-based
criteria (7 and 8) run real optimization on one CPU core and dominate the
suite's runtime; everything else finishes in seconds.
"""

import csv
import math
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from scratchseg.data import GenConfig, generate_dataset, generate_sample, normalize_image
from scratchseg.denoiser import DenoiserConfig, build_denoiser, predict_noise
from scratchseg.diffusion import (
    NoiseSchedule,
    estimate_x0,
    forward_sample,
    make_schedule,
    run_inference,
)
from scratchseg.metrics import (
    ConfusionCounts,
    aggregate,
    evaluate_pair,
    metrics,
    sliding_window_infer,
)
from scratchseg.supervision import (
    PredictionSequenceSet,
    build_sequences,
    unsupervised_loss,
)
from scratchseg.texture import consistency_feature, map_entropy, pattern_encode, texture_entropy
from scratchseg.training import TrainConfig, supervised_step, train

torch.set_num_threads(1)

TINY_NET = DenoiserConfig(base_channels=8, depth=2, channel_mults=(1, 2), time_embed_dim=16)


def report(n, detail):
    print(f"criterion {n}: PASS — {detail}")


# --------------------------------------------------------------------------
# 1. diffusion round trip
# --------------------------------------------------------------------------


def test_criterion_01_diffusion_round_trip():
    started = time.monotonic()
    schedule = make_schedule(100)
    gen = np.random.default_rng(0)
    y = torch.from_numpy(
        gen.uniform(-1.0, 1.0, size=(1000, 8, 8)).astype(np.float32)
    )
    t = gen.integers(1, 101, size=1000)
    eps = torch.from_numpy(gen.standard_normal((1000, 8, 8)).astype(np.float32))
    x_t = forward_sample(y, t, eps, schedule)
    recovered = estimate_x0(x_t, t, eps, schedule)
    err = float((recovered - y.double()).abs().max())
    elapsed = time.monotonic() - started
    assert err <= 1e-5
    assert elapsed < 10.0
    report(1, f"1000 float32 triples, max abs err {err:.2e} <= 1e-5 in {elapsed:.2f}s")


# --------------------------------------------------------------------------
# 2. pattern-encoding bijectivity
# --------------------------------------------------------------------------


def test_criterion_02_pattern_bijectivity():
    started = time.monotonic()
    binary_ids = set()
    for code in range(512):
        bits = (code >> np.arange(9)) & 1
        window = bits.reshape(3, 3).astype(np.uint8)
        ids = pattern_encode(window, num_classes=2, window=3)
        assert ids.shape == (1, 1)
        binary_ids.add(int(ids[0, 0]))
    assert binary_ids == set(range(512))

    ternary_ids = set()
    for code in range(3**4):
        digits = (code // 3 ** np.arange(4)) % 3
        window = digits.reshape(2, 2).astype(np.uint8)
        ids = pattern_encode(window, num_classes=3, window=2)
        ternary_ids.add(int(ids[0, 0]))
    assert len(ternary_ids) == 3**4
    elapsed = time.monotonic() - started
    assert elapsed < 1.0
    report(2, f"512 binary 3x3 ids span 0..511; 81 ternary 2x2 ids distinct ({elapsed:.2f}s)")


# --------------------------------------------------------------------------
# 3. entropy anchors
# --------------------------------------------------------------------------


def test_criterion_03_entropy_anchors():
    one_hot = np.zeros(512)
    one_hot[7] = 1.0
    assert abs(texture_entropy(one_hot) - 0.0) <= 1e-9

    fair = np.array([0.5, 0.5])
    assert abs(texture_entropy(fair) - 1.0) <= 1e-9

    uniform = np.full(512, 1.0 / 512.0)
    assert abs(texture_entropy(uniform) - 9.0) <= 1e-9
    report(3, "one-hot -> 0 bits, fair split -> 1 bit, uniform-512 -> 9 bits (1e-9)")


# --------------------------------------------------------------------------
# 4. consistency-feature contract
# --------------------------------------------------------------------------


def brute_highfreq_fraction(series, cutoff):
    """Independent O(n^2) DFT magnitude-fraction oracle."""
    series = np.asarray(series, dtype=np.float64)
    n = series.size
    total = 0.0
    high = 0.0
    for f in range(n):
        acc = 0.0 + 0.0j
        for k in range(n):
            acc += series[k] * np.exp(-2j * np.pi * f * k / n)
        mag = abs(acc)
        total += mag
        if f > cutoff:
            high += mag
    return high / total if total > 0 else 0.0


def test_criterion_04_lambda_contract():
    assert consistency_feature([np.full(13, 3.7)], 9) == pytest.approx(0.0, abs=1e-12)

    gen = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        series = gen.uniform(0.0, 9.0, size=13)
        lam = consistency_feature([series], 9)
        assert 0.0 <= lam <= 1.0
        worst = max(worst, abs(lam - brute_highfreq_fraction(series, 9)))
    assert worst <= 1e-9
    report(4, f"constant -> 0; 100 random length-13 series in [0,1], oracle gap {worst:.1e}")


# --------------------------------------------------------------------------
# 5. loss oracles
# --------------------------------------------------------------------------


class _ExactNoiseOracle:
    def __init__(self, signal, schedule):
        self.signal = signal
        self.schedule = schedule

    def __call__(self, x_t, t, image, prior):
        abar = torch.from_numpy(
            np.asarray(self.schedule.alpha_bar(t.numpy()), dtype=np.float64)
        ).reshape(-1, 1, 1, 1)
        y = self.signal[:, None].to(torch.float64)
        return (x_t.double() - torch.sqrt(abar) * y) / torch.sqrt(1.0 - abar)


def test_criterion_05_loss_oracles():
    # supervised loss vanishes under the exact-noise oracle
    schedule = make_schedule(20)
    cfg = GenConfig(size=(16, 16), seed=0)
    gen = np.random.default_rng(0)
    batch = [generate_sample(cfg, gen) for _ in range(3)]
    signal = 2.0 * torch.stack(
        [torch.as_tensor(r.classes >= 1, dtype=torch.float64) for r in batch]
    ) - 1.0
    sup = supervised_step(batch, _ExactNoiseOracle(signal, schedule), schedule, None, 5.0, rng=3)
    assert sup <= 1e-10

    # hand-evaluated single-position, single-trajectory consistency loss:
    # residual = (0.9 - 0.8*1)/0.6 - 0 = 1/6, gated full, scaled by 1/(M*N)=1,
    # squared -> 1/36
    hand_schedule = NoiseSchedule(alphas=[0.8, 0.8], alpha_bars=[0.8, 0.64])
    seq = PredictionSequenceSet(
        steps=(2,),
        x0_preds=torch.full((1, 1, 2, 2), 0.8, dtype=torch.float64),
        noisy=torch.full((1, 1, 2, 2), 0.9, dtype=torch.float64),
        eps_hat=torch.zeros((1, 1, 2, 2), dtype=torch.float64),
    )
    hand = unsupervised_loss(
        seq, torch.ones((2, 2)), torch.ones((2, 2)), hand_schedule
    )
    assert abs(float(hand) - 1.0 / 36.0) <= 1e-9

    # empty loss mask -> exactly zero gradient on every parameter
    net = build_denoiser(TINY_NET, seed=1)
    net.eval()
    image = normalize_image(batch[0].image)
    seq_set = build_sequences(image, net, make_schedule(8), 2, 2, np.random.default_rng(0))
    n, m = seq_set.num_trajectories, seq_set.num_positions
    h, w = seq_set.noisy.shape[-2:]
    eps_re = predict_noise(
        net,
        seq_set.noisy.reshape(n * m, h, w),
        np.tile(np.asarray(seq_set.steps), n),
        image,
        seq_set.prior_inputs().reshape(n * m, h, w),
    )
    loss = unsupervised_loss(
        seq_set,
        torch.ones((h, w)),
        torch.zeros((h, w)),
        make_schedule(8),
        eps_hat=eps_re.reshape(n, m, h, w),
    )
    loss.backward()
    for name, p in net.named_parameters():
        if p.grad is not None:
            assert float(p.grad.abs().max()) == 0.0, name
    report(5, f"oracle sup loss {sup:.1e}; hand case |loss-1/36|={abs(float(hand)-1/36):.1e}; "
              "masked-out gradients exactly zero")


# --------------------------------------------------------------------------
# 6. finite-difference gradient check
# --------------------------------------------------------------------------


def test_criterion_06_gradient_check():
    started = time.monotonic()
    torch.manual_seed(0)
    net = build_denoiser(TINY_NET, seed=2).double()
    schedule = make_schedule(10)
    gen = np.random.default_rng(6)
    x_t = torch.from_numpy(gen.standard_normal((8, 8)))
    image = torch.from_numpy(gen.standard_normal((8, 8)))
    prior = torch.from_numpy(gen.uniform(-1, 1, (8, 8)))
    target = torch.from_numpy(gen.standard_normal((8, 8)))

    def loss_value():
        pred = predict_noise(net, x_t, 4, image, prior)
        return ((target - pred) ** 2).mean()

    loss = loss_value()
    net.zero_grad()
    loss.backward()

    params = [p for p in net.parameters() if p.requires_grad]
    flat = [(p, i) for p in params for i in range(p.numel())]
    picks = np.random.default_rng(66).choice(len(flat), size=24, replace=False)
    h = 1e-6
    checked = 0
    for pick in picks:
        p, i = flat[int(pick)]
        analytic = float(p.grad.reshape(-1)[i])
        with torch.no_grad():
            base = float(p.reshape(-1)[i])
            p.reshape(-1)[i] = base + h
            up = float(loss_value())
            p.reshape(-1)[i] = base - h
            down = float(loss_value())
            p.reshape(-1)[i] = base
        numeric = (up - down) / (2 * h)
        if abs(analytic) < 1e-9 and abs(numeric) < 1e-9:
            continue
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric))
        assert rel <= 1e-3, f"param {i}: analytic {analytic} vs numeric {numeric}"
        checked += 1
    elapsed = time.monotonic() - started
    assert checked >= 20
    assert elapsed < 120.0
    report(6, f"{checked} sampled parameters within 1e-3 of central differences ({elapsed:.1f}s)")


# --------------------------------------------------------------------------
# 7. overfit smoke
# --------------------------------------------------------------------------


def test_criterion_07_overfit_smoke():
    started = time.monotonic()
    cfg = GenConfig(size=(64, 64), seed=0, shallow_count=(1, 3), deep_count=(1, 3))
    gen = np.random.default_rng(0)
    labeled = [generate_sample(cfg, gen) for _ in range(4)]
    config = TrainConfig(
        total_steps=100,
        rollout_steps=12,
        rollout_chains=2,
        batch_size=4,
        epochs=300,
        max_steps=300,
        learning_rate=1.5e-3,
        augment=False,
        seed=7,
        denoiser=DenoiserConfig(
            base_channels=8, depth=3, channel_mults=(1, 2, 4), time_embed_dim=32
        ),
    )
    with tempfile.TemporaryDirectory() as tmp:
        _, metrics_path = train(config, labeled, out_dir=tmp)
        with open(metrics_path) as fh:
            losses = [float(r["loss_l"]) for r in csv.DictReader(fh) if r["loss_l"] != ""]
    assert len(losses) == 300
    initial = float(np.mean(losses[:10]))
    final = float(np.mean(losses[-10:]))
    drop = 1.0 - final / initial
    elapsed = time.monotonic() - started
    assert drop >= 0.80, f"loss fell only {drop:.1%} (initial {initial:.3f}, final {final:.3f})"
    assert elapsed < 900.0
    report(7, f"300 supervised steps at T=100: loss {initial:.3f} -> {final:.3f} "
              f"({drop:.1%} drop) in {elapsed:.0f}s")


# --------------------------------------------------------------------------
# 8. semi-supervised directional uplift
# --------------------------------------------------------------------------


def _uplift_eval(record, config, val, total_steps):
    net = build_denoiser(config.denoiser, seed=0)
    net.load_state_dict(record.model_state)
    net.eval()
    schedule = make_schedule(total_steps)
    steps = list(range(total_steps, 0, -1))
    pairs = []
    for i, rec in enumerate(val):
        probs = []
        for k in range(8):
            result = run_inference(
                normalize_image(rec.image), net, schedule, steps, rng=1000 + 31 * i + k
            )
            probs.append(((result.x0_trace[-1] + 1.0) / 2.0).numpy())
        prob = np.mean(probs, axis=0)
        pairs.append(((prob >= 0.5).astype(np.uint8), rec.classes))
    return aggregate(pairs)


def test_criterion_08_semi_supervised_uplift():
    """Directional benefit of the consistency term at desk scale.

    Trains matched supervised-only and semi-supervised arms (identical labeled
    budget; the semi arm additionally consumes 200 unlabeled images) over three
    seeds and requires the median IoU change to be strictly positive with the
    median shallow-recall change non-negative.

    KNOWN FAILURE at this scale.  Calibration found the consistency loss is
    net-destructive on 64x64 inputs with a 10-step schedule: rollout
    trajectories saturate early (the compressed schedule clips five of the ten
    noise rates at their ceiling, so reverse updates amplify estimate errors
    ~31x per visited step), which caps pseudo-label precision at 8-22% however
    the confidence/dispersion gates are set, and a control run that substituted
    ground-truth pseudo-labels with fully open gates still degraded IoU and
    deep recall.  The uplift this test asks for therefore appears to require
    larger images, longer schedules, and far more data than a desk benchmark
    allows.  The test states the intended contract and is kept failing rather
    than weakened.
    """
    started = time.monotonic()
    gen_cfg = GenConfig(size=(64, 64), seed=100)
    gen = np.random.default_rng(100)
    labeled = [generate_sample(gen_cfg, gen) for _ in range(50)]
    unlabeled = [generate_sample(gen_cfg, gen) for _ in range(200)]
    val = [generate_sample(gen_cfg, gen) for _ in range(8)]
    total_steps = 10

    def run_arm(seed, with_unlabeled):
        config = TrainConfig(
            total_steps=total_steps,
            rollout_steps=6,
            rollout_chains=2,
            batch_size=4,
            epochs=20,
            learning_rate=1e-3,
            seed=seed,
            highfreq_cutoff=6,
            denoiser=DenoiserConfig(
                base_channels=16, depth=3, channel_mults=(1, 2, 4), time_embed_dim=64
            ),
        )
        with tempfile.TemporaryDirectory() as tmp:
            record, _ = train(
                config, labeled, unlabeled if with_unlabeled else None, out_dir=tmp
            )
        return _uplift_eval(record, config, val, total_steps)

    d_iou = []
    d_shallow = []
    for seed in (3, 5, 7):
        sup = run_arm(seed, False)
        semi = run_arm(seed, True)
        d_iou.append(semi.iou - sup.iou)
        d_shallow.append(semi.shallow_recall - sup.shallow_recall)
        print(
            f"  seed {seed}: sup iou={sup.iou:.4f} semi iou={semi.iou:.4f} "
            f"sup shallow={sup.shallow_recall:.4f} semi shallow={semi.shallow_recall:.4f}"
        )
    med_iou = float(np.median(d_iou))
    med_shallow = float(np.median(d_shallow))
    elapsed = time.monotonic() - started
    assert med_iou > 0.0, f"median IoU uplift {med_iou:+.4f} is not positive"
    assert med_shallow >= 0.0, f"median shallow-recall change {med_shallow:+.4f} decreased"
    assert elapsed < 7200.0
    report(8, f"median IoU uplift {med_iou:+.4f}, median shallow-recall change "
              f"{med_shallow:+.4f} over 3 seeds ({elapsed:.0f}s)")


# --------------------------------------------------------------------------
# 9. sliding-window equivalence
# --------------------------------------------------------------------------


class _ConstantTargetDenoiser:
    def __init__(self, c, schedule):
        self.c = c
        self.schedule = schedule

    def __call__(self, x_t, t, image, prior):
        t_int = int(t.reshape(-1)[0]) if torch.is_tensor(t) else int(t)
        abar = self.schedule.alpha_bar(t_int)
        return (x_t.double() - math.sqrt(abar) * self.c) / math.sqrt(1 - abar)


def test_criterion_09_sliding_window_equivalence():
    net = build_denoiser(TINY_NET, seed=0)
    net.eval()
    schedule = make_schedule(100)
    image = np.random.default_rng(9).normal(size=(32, 32)).astype(np.float32)
    steps = [5, 3, 1]
    mask, prob = sliding_window_infer(
        image, net, schedule, window=32, stride=32, seed=9, steps=steps
    )
    direct = run_inference(image, net, schedule, steps, rng=9)
    direct_prob = (direct.mask.numpy() + 1.0) / 2.0
    assert np.array_equal(mask, (direct_prob >= 0.5).astype(np.uint8))
    assert np.array_equal(prob, direct_prob)

    stub = _ConstantTargetDenoiser(0.5, schedule)
    _, stitched = sliding_window_infer(
        np.zeros((24, 24), np.float32), stub, schedule, window=16, stride=8, seed=4,
        steps=[2, 1],
    )
    overlap_err = float(np.abs(stitched - 0.75).max())
    assert overlap_err <= 1e-12
    report(9, f"window=image reproduces direct inference exactly; "
              f"overlap averaging flat to {overlap_err:.1e}")


# --------------------------------------------------------------------------
# 10. determinism
# --------------------------------------------------------------------------


def test_criterion_10_determinism(tmp_path):
    cfg = GenConfig(size=(16, 16), seed=3)
    counts = {"labeled_train": 2, "unlabeled_train": 2, "val": 1, "test": 1}
    generate_dataset(cfg, counts, tmp_path / "a")
    generate_dataset(cfg, counts, tmp_path / "b")
    files_a = sorted((tmp_path / "a").rglob("*"))
    files_b = sorted((tmp_path / "b").rglob("*"))
    assert [p.relative_to(tmp_path / "a") for p in files_a] == [
        p.relative_to(tmp_path / "b") for p in files_b
    ]
    for pa, pb in zip(files_a, files_b):
        if pa.is_file():
            assert pa.read_bytes() == pb.read_bytes(), pa.name

    gen = np.random.default_rng(10)
    labeled = [generate_sample(GenConfig(size=(16, 16), seed=1), gen) for _ in range(2)]
    config = TrainConfig(
        total_steps=4, rollout_steps=2, rollout_chains=2, highfreq_cutoff=1,
        batch_size=2, epochs=2, seed=5, denoiser=TINY_NET,
        confidence_threshold=0.0, dispersion_threshold=1.0,
    )

    def loss_columns(out):
        _, path = train(config, labeled, out_dir=out)
        with open(path) as fh:
            return [
                (r["step"], r["loss_l"], r["loss_u"], r["lambda_mean"])
                for r in csv.DictReader(fh)
            ]

    assert loss_columns(tmp_path / "run1") == loss_columns(tmp_path / "run2")

    net = build_denoiser(TINY_NET, seed=0)
    net.eval()
    schedule = make_schedule(10)
    image = np.random.default_rng(2).normal(size=(16, 16)).astype(np.float32)
    first = run_inference(image, net, schedule, [8, 4, 1], rng=77)
    second = run_inference(image, net, schedule, [8, 4, 1], rng=77)
    assert torch.equal(first.mask, second.mask)
    for a, b in zip(first.x0_trace, second.x0_trace):
        assert torch.equal(a, b)
    report(10, "byte-identical dataset, identical logged losses, identical inference")


# --------------------------------------------------------------------------
# 11. metric identities
# --------------------------------------------------------------------------


def test_criterion_11_metric_identities():
    gen = np.random.default_rng(11)
    checked = 0
    for _ in range(1000):
        tp, fp, fn, tn = (int(v) for v in gen.integers(0, 400, 4))
        rep = metrics(ConfusionCounts(tp, fp, fn, tn), (0, 0), (0, 0))
        if "iou" in rep.undefined:
            continue
        assert rep.dice == pytest.approx(2 * rep.iou / (1 + rep.iou), abs=1e-12)
        checked += 1

    gt = np.array([[1, 2], [0, 0]], np.uint8)
    perfect = evaluate_pair(gt > 0, gt)
    assert (perfect.iou, perfect.dice, perfect.accuracy) == (1.0, 1.0, 1.0)
    assert (perfect.shallow_recall, perfect.deep_recall) == (1.0, 1.0)
    disjoint = evaluate_pair(np.array([[0, 0], [1, 1]], bool), gt)
    assert (disjoint.iou, disjoint.dice) == (0.0, 0.0)
    assert (disjoint.shallow_recall, disjoint.deep_recall) == (0.0, 0.0)
    report(11, f"dice = 2*iou/(1+iou) on {checked} random counts; fixtures exact")
