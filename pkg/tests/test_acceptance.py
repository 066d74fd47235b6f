"""Acceptance criteria 1-9.

Each test records a one-line verdict that is printed at the end of the
session (see ``pytest_terminal_summary`` in conftest).  Run alone with::

    python3 -m pytest tests/test_acceptance.py -v
"""
import json
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from pams import experiments as X
from pams import quant as Q
from pams import tensor as T
from pams.cli import main as cli_main
from pams.export import pack_model, save_checkpoint, size_from_counts, size_report
from pams.losses import LossWeights, pixel_l1, skt_loss, total_loss
from pams.model import ModelConfig, build_model, quantize_from
from pams.tensor import Tape, Tensor
from pams.training import calibrate_alphas, evaluate

VERDICTS: dict[int, str] = {}


def verdict(n: int, ok: bool, detail: str) -> None:
    VERDICTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, VERDICTS[n]


def exact_quant(x, n, a):
    x, a = Fraction(x), Fraction(a)
    levels = 2 ** (n - 1) - 1
    v = min(max(x, -a), a) * levels / a
    code = int(abs(v) + Fraction(1, 2)) * (1 if v >= 0 else -1)
    return float(code * a / levels)


def ulps(a, b):
    return abs(a - b) / np.spacing(max(abs(a), abs(b), np.finfo(float).tiny))


# ---------------------------------------------------------------- 1

def test_c1_quantizer_exactness():
    st = lambda n, a: Q.QuantizerState(n, Q.PAMS, alpha=Tensor(np.array(float(a))))
    cases = [
        (Q.quantize_symmetric(np.array([0.5]), 8, 1.0).values.data[0], exact_quant(0.5, 8, 1)),
        (Q.quantize_activation_pams(np.array([0.5]), st(8, 1)).values.data[0], 64 / 127),
        (Q.quantize_activation_pams(np.array([0.25]), st(4, 1)).values.data[0], exact_quant(0.25, 4, 1)),
        (Q.quantize_symmetric(np.array([2.0]), 8, 1.0).values.data[0], 1.0),
        (Q.quantize_weights(Tensor(np.array([-2.0, 1.0])), 8).values.data[1], exact_quant(1, 8, 2)),
    ]
    worst_ulp = max(ulps(a, b) for a, b in cases)

    rng = np.random.default_rng(0)
    n_cases, fails = 100_000, []
    ns = rng.integers(2, 13, n_cases)
    as_ = np.exp(rng.uniform(np.log(1e-3), np.log(1e3), n_cases))
    xs = rng.normal(size=n_cases) * as_ * rng.choice([0.5, 1.0, 3.0], n_cases)
    for n in range(2, 13):
        sel = ns == n
        x, a = xs[sel], as_[sel]
        levels = 2 ** (n - 1) - 1
        step = a / levels
        q = np.clip(Q.round_half_away(np.clip(x, -a, a) * levels / a) * step, -a, a)
        # the library works with scalar bounds, so go element by element in blocks of equal a
        lib = np.array([Q.quantize_symmetric(np.array([xi]), n, ai).values.data[0] for xi, ai in zip(x[:800], a[:800])])
        if not np.array_equal(lib, q[:800]):
            fails.append(f"n={n} mismatch vs vectorized reference")
        q2 = np.array([Q.quantize_symmetric(np.array([qi]), n, ai).values.data[0] for qi, ai in zip(lib, a[:800])])
        if not np.array_equal(q2, lib):
            fails.append(f"n={n} idempotence")
        neg = np.array([Q.quantize_symmetric(np.array([-xi]), n, ai).values.data[0] for xi, ai in zip(x[:800], a[:800])])
        if not np.array_equal(neg, -lib):
            fails.append(f"n={n} symmetry")
        if np.any(np.abs(q) > a):
            fails.append(f"n={n} bound")
        inside = np.abs(x) <= a
        if np.any(np.abs(q - x)[inside] > step[inside] / 2 * (1 + 1e-12)):
            fails.append(f"n={n} error bound")

    # bulk properties with a shared bound per call, covering all 1e5 cases
    for n in range(2, 13):
        for a in (1e-3, 0.37, 1.0, 55.5, 1e3):
            x = rng.normal(size=n_cases // 55) * a * 2
            q = Q.quantize_symmetric(x, n, a).values.data
            if not (np.array_equal(Q.quantize_symmetric(q, n, a).values.data, q)
                    and np.array_equal(Q.quantize_symmetric(-x, n, a).values.data, -q)
                    and np.all(np.abs(q) <= a)):
                fails.append(f"n={n} a={a} bulk")
    levels_ok = all(len(np.unique(Q.quantize_symmetric(np.linspace(-1.5, 1.5, 200_001), n, 1.1).values.data))
                    == 2 ** n - 1 for n in range(2, 11))
    ok = worst_ulp <= 1 and not fails and levels_ok
    verdict(1, ok, f"worst example error {worst_ulp:.0f} ulp; property failures {fails[:3]}; "
                   f"level count {'ok' if levels_ok else 'wrong'}")


# ---------------------------------------------------------------- 2

def test_c2_gradient_sign_table():
    mismatches = 0
    total = 0
    for alpha in (0.01, 0.5, 1.0, 3.0, 100.0):
        xs = np.array([-10 * alpha, -alpha * (1 + 1e-9), -alpha, -alpha * (1 - 1e-9), -0.3 * alpha, 0.0,
                       0.3 * alpha, alpha * (1 - 1e-9), alpha, alpha * (1 + 1e-9), 10 * alpha])
        for x in xs:
            st = Q.QuantizerState(4, Q.PAMS, alpha=Tensor(np.array(alpha)))
            res = Q.quantize_activation_pams(np.array([x]), st)
            gx, ga = Q.pams_backward(np.array([1.0]), res, st)
            expected = -1.0 if x <= -alpha else (1.0 if x >= alpha else 0.0)
            mismatches += (ga != expected) + (gx[0] != (1.0 if expected == 0 else 0.0))
            total += 1
    neg = np.linspace(-5, -1e-9, 101)
    pact_ga, pams_ga = [], []
    for x in neg:
        for mode, store in ((Q.PACT, pact_ga), (Q.PAMS, pams_ga)):
            st = Q.QuantizerState(4, mode, alpha=Tensor(np.array(1.0)))
            xt = Tensor(np.array([x]), requires_grad=True)
            with Tape() as tape:
                loss = T.sum_(Q.quantize_activation(xt, st).values)
            tape.backward(loss)
            store.append(st.alpha_grad)
    pact_zero = all(g == 0 for g in pact_ga)
    pams_expected = all(g == (-1.0 if x <= -1 else 0.0) for g, x in zip(pams_ga, neg))
    verdict(2, mismatches == 0 and pact_zero and pams_expected,
            f"{total} sign-table points, {mismatches} mismatches; PACT zero on x<0: {pact_zero}; "
            f"PAMS -1 on x<=-alpha: {pams_expected}")


# ---------------------------------------------------------------- 3

class KinkRecorder:
    """Collects (argument - kink) arrays for ReLU, activation clamps and |sr - hr|."""

    def __init__(self, monkeypatch):
        self.args = []
        relu, pams_q = T.relu, Q.quantize_activation_pams

        def rec_relu(x):
            self.args.append(x.data.ravel().copy())
            return relu(x)

        def rec_pams(x, state):
            d = T.as_tensor(x).data.ravel()
            a = state.alpha_value
            self.args += [d - a, d + a]
            return pams_q(x, state)

        monkeypatch.setattr(T, "relu", rec_relu)
        monkeypatch.setattr(Q, "quantize_activation_pams", rec_pams)

    def snapshot(self):
        out = np.concatenate(self.args)
        self.args = []
        return out


def test_c3_autodiff_finite_differences(monkeypatch):
    rng = np.random.default_rng(3)
    cfg = ModelConfig(n_blocks=2, n_channels=8)
    teacher = build_model(cfg, seed=11, dtype=np.float64)
    student = quantize_from(build_model(cfg, seed=12, dtype=np.float64), 4)
    x = rng.uniform(0, 255, size=(2, 3, 8, 8))
    hr = rng.uniform(0, 255, size=(2, 3, 16, 16))
    calibrate_alphas(student, [x], 1)
    for st in student.quantizer_states.values():  # force some saturation on both paths
        st.alpha_value *= 0.6
    f_t = teacher.forward(x)[0].data
    w = LossWeights(1.0, 1e3)
    kinks = KinkRecorder(monkeypatch)

    def loss_fn():
        f_s, sr = student.forward(Tensor(x))
        kinks.args.append((sr.data - hr).ravel().copy())
        return total_loss(pixel_l1(sr, hr), skt_loss(f_s, f_t), w)

    h, tol, near = 1e-4, 1e-3, 1e-6
    with Q.ste_surrogate():
        student.zero_grad()
        with Tape() as tape:
            loss = loss_fn()
        tape.backward(loss)
        base = np.sign(kinks.snapshot())
        params = student.trainable()
        analytic = {k: np.array(p.grad, dtype=np.float64).copy() for k, p in params.items()}
        gmax = max(np.abs(g).max() for g in analytic.values())
        floor = 1e-7 * gmax  # below this both values are roundoff-level
        checked = excluded = 0
        worst, worst_name = 0.0, ""
        for name, p in params.items():
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                fp = float(loss_fn().data)
                kp = kinks.snapshot()
                flat[i] = old - h
                fm = float(loss_fn().data)
                km = kinks.snapshot()
                flat[i] = old
                if (np.any(np.sign(kp) != base) or np.any(np.sign(km) != base)
                        or np.abs(kp).min() < near or np.abs(km).min() < near):
                    excluded += 1
                    continue
                num = (fp - fm) / (2 * h)
                ana = analytic[name].reshape(-1)[i]
                err = abs(num - ana) / max(abs(num), abs(ana), floor)
                checked += 1
                if err > worst:
                    worst, worst_name = err, f"{name}[{i}]"
    alpha_checked = [k for k in params if k.endswith(".alpha")]
    ok = worst <= tol and checked > 0.9 * (checked + excluded) and len(alpha_checked) == 4
    verdict(3, ok, f"{checked} gradient entries checked ({excluded} excluded near kinks), "
                   f"max rel err {worst:.2e} at {worst_name}; alphas included: {len(alpha_checked)}")


# ---------------------------------------------------------------- 4

def test_c4_ema_oracle():
    # scripted stream straight into the update rule
    rng = np.random.default_rng(4)
    stream = [rng.uniform(0.5, 8.0, size=rng.integers(1, 6)) for _ in range(12)]
    st = Q.QuantizerState(8, Q.FIXED_MAX)
    for b in stream:
        Q.ema_update_alpha(st, b)
    ref = float(np.mean(stream[0]))
    for b in stream[1:]:
        ref = 0.9997 * ref + (1 - 0.9997) * float(np.mean(b))
    err_rule = abs(st.alpha_value - ref)

    # calibrate_alphas with a model whose site activations are known in closed form:
    # identity-like blocks, zero head bias, so act1 = relu(conv1(head(x))) is linear in x >= 0
    m = build_model(ModelConfig(n_blocks=1, n_channels=3, n_bits=8), seed=0, dtype=np.float64, mean_rgb=(0, 0, 0))
    for p in m.parameters():
        p.data[:] = 0
    eye = np.zeros((3, 3, 3, 3))
    eye[range(3), range(3), 1, 1] = 1.0
    for k in ("head", "blocks.0.conv1", "blocks.0.conv2"):
        m.params[f"{k}.weight"].data[:] = eye
    batches = [rng.uniform(0, 255, size=(int(rng.integers(1, 4)), 3, 6, 6)) for _ in range(7)]
    calibrate_alphas(m, batches, len(batches))
    # act1 = act2 = x / 255 exactly, so per-sample max|act| = max(x) / 255
    exp = float(np.mean(batches[0].reshape(len(batches[0]), -1).max(1)) / 255)
    for b in batches[1:]:
        exp = 0.9997 * exp + 0.0003 * float(np.mean(b.reshape(len(b), -1).max(1)) / 255)
    err_cal = max(abs(s.alpha_value - exp) for s in m.quantizer_states.values())
    verdict(4, err_rule <= 1e-9 and err_cal <= 1e-9,
            f"update-rule error {err_rule:.1e}, calibrate_alphas error {err_cal:.1e} (tol 1e-9)")


# ---------------------------------------------------------------- 5

def test_c5_skt_properties():
    rng = np.random.default_rng(5)
    f = rng.normal(size=(3, 8, 6, 6))
    self_loss = float(skt_loss(f, f).data)
    scaled = max(abs(float(skt_loss(c * f, f).data)) for c in (0.1, 3.0, 100.0))
    vals = [float(skt_loss(rng.normal(size=(2, 4, 5, 5)) * rng.uniform(0.01, 100),
                           rng.normal(size=(2, 4, 5, 5))).data) for _ in range(200)]
    # extreme case: disjoint supports give the maximum sqrt(2) for non-negative maps
    a, b = np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2))
    a[0, 0, 0, 0], b[0, 0, 1, 1] = 1, 1
    vals.append(float(skt_loss(a, b).data))
    fs = Tensor(rng.normal(size=(2, 4, 5, 5)), requires_grad=True)
    ft = Tensor(rng.normal(size=(2, 4, 5, 5)), requires_grad=True)
    with Tape() as tape:
        loss = skt_loss(fs, ft)
    tape.backward(loss)
    teacher_zero = ft.grad is None or not np.any(ft.grad)
    ok = abs(self_loss) <= 1e-6 and scaled <= 1e-6 and 0 <= min(vals) and max(vals) <= 2 and teacher_zero
    verdict(5, ok, f"skt(F,F)={self_loss:.1e}, max skt(cF,F)={scaled:.1e}, range [{min(vals):.3f}, "
                   f"{max(vals):.3f}], teacher grad zero: {teacher_zero}")


# ---------------------------------------------------------------- 6

def test_c6_storage_accounting():
    r8 = size_from_counts(1.176e6, 0.337e6, 8)
    r4 = size_from_counts(1.176e6, 0.337e6, 4)
    e8 = abs(r8.storage_quantized / 0.631e6 - 1)
    e4 = abs(r4.storage_quantized / 0.484e6 - 1)
    efp = abs(r8.storage_fp / 1.518e6 - 1)
    rng = np.random.default_rng(6)
    mismatches = []
    for n in (2, 3, 4, 5, 8):
        m = quantize_from(build_model(ModelConfig(), seed=n), n)
        calibrate_alphas(m, [rng.uniform(0, 255, size=(1, 3, 8, 8))], 1)
        pm = pack_model(m)
        padding = sum(len(t.data) * 8 - t.count * n for t in pm.quantized.values())
        if pm.payload_bits() - padding != size_report(m, n).storage_quantized * 32:
            mismatches.append(n)
    ok = e8 <= 0.01 and e4 <= 0.01 and efp <= 0.005 and not mismatches
    verdict(6, ok, f"8-bit {r8.storage_quantized / 1e6:.4f}M ({e8:.2%} off), 4-bit "
                   f"{r4.storage_quantized / 1e6:.4f}M ({e4:.2%} off), fp {r8.storage_fp / 1e6:.3f}M "
                   f"({efp:.2%} off 1.518M); packed-bit mismatches at n={mismatches}")


# ---------------------------------------------------------------- 7

@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    tr, val = X.toy_corpus(root / "data")
    teacher = X.desk_teacher(tr)
    save_checkpoint(root / "teacher.ckpt", teacher)
    return {"root": root, "train": tr, "val": val, "teacher": teacher,
            "teacher_psnr": evaluate(teacher, val, ssim=False).psnr_db}


@pytest.fixture(scope="module")
def four_bit_runs(desk):
    seeds = range(5)
    rows = X.compare(desk["teacher"], desk["train"], desk["val"], ["pams", "fixed_max"], [4], seeds,
                     [1e3], ssim=False)
    rows += X.compare(desk["teacher"], desk["train"], desk["val"], ["pams"], [4], seeds, [0.0], ssim=False)
    return rows, X.medians(rows)


def test_c7a_teacher_beats_bicubic(desk):
    bic = X.bicubic_psnr(desk["val"])
    gain = desk["teacher_psnr"] - bic
    _sub_verdict("a", gain >= 0.5, f"teacher {desk['teacher_psnr']:.3f} dB vs bicubic {bic:.3f} dB, gain {gain:+.3f} dB (need >= 0.5)")


def test_c7b_eight_bit_student(desk):
    st = X.desk_student(desk["teacher"], desk["train"], 8)
    p = evaluate(st, desk["val"], ssim=False).psnr_db
    drop = desk["teacher_psnr"] - p
    _sub_verdict("b", drop <= 0.5, f"8-bit PAMS {p:.3f} dB vs teacher {desk['teacher_psnr']:.3f} dB, "
                                   f"drop {drop:+.3f} dB (need <= 0.5)")


def test_c7c_pams_vs_fixed_max(four_bit_runs):
    rows, med = four_bit_runs
    pams, fixed = med[("pams", 4, 1e3)], med[("fixed_max", 4, 1e3)]
    per_seed = " ".join(f"{r.quantizer}/{r.seed}={r.psnr:.3f}" for r in rows if r.lambda_s == 1e3)
    _sub_verdict("c", pams >= fixed, f"4-bit median PAMS {pams:.3f} dB vs fixed-max {fixed:.3f} dB "
                                     f"(need >=); runs: {per_seed}")


def test_c7d_skt_helps(four_bit_runs):
    rows, med = four_bit_runs
    skt, noskt = med[("pams", 4, 1e3)], med[("pams", 4, 0.0)]
    per_seed = " ".join(f"ls{r.lambda_s:g}/{r.seed}={r.psnr:.3f}" for r in rows if r.quantizer == "pams")
    _sub_verdict("d", skt >= noskt, f"4-bit median with SKT {skt:.3f} dB vs without {noskt:.3f} dB "
                                    f"(need >=); runs: {per_seed}")


def _sub_verdict(part: str, ok: bool, detail: str) -> None:
    key = {"a": 7.1, "b": 7.2, "c": 7.3, "d": 7.4}[part]
    VERDICTS[key] = f"criterion 7({part}): {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, VERDICTS[key]


# ---------------------------------------------------------------- 8

def test_c8_cli_determinism(desk, tmp_path):
    cfg = {"model": {"n_blocks": 4, "n_channels": 16},
           "train": {"epochs": 2, "steps_per_epoch": 3, "batch_size": 4, "patch_size": 24, "lr": 1e-4,
                     "lr_halving_period": 1, "seed": 7}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    data, teacher = str(desk["root"] / "data"), str(desk["root"] / "teacher.ckpt")
    same = []
    for kind, extra in (("pretrain", []), ("quantized", ["--teacher", teacher, "--bits", "4"])):
        outs = []
        for run in ("a", "b"):
            out = tmp_path / f"{kind}_{run}"
            assert cli_main(["train", "--config", str(tmp_path / "cfg.json"), "--data", data,
                             "--out", str(out)] + extra) == 0
            outs.append(out)
        for f in ("model.ckpt", "report.json"):
            same.append((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes())
    verdict(8, all(same), f"bit-identical checkpoint/report pairs: {sum(same)}/{len(same)} "
                          "(full-precision and 4-bit runs)")


# ---------------------------------------------------------------- 9

def test_c9_activation_range_claim(desk, tmp_path):
    table = tmp_path / "stats.tsv"
    assert cli_main(["stats", "--model", str(desk["root"] / "teacher.ckpt"), "--data",
                     str(desk["root"] / "data"), "--out", str(table)]) == 0
    per_site: dict[str, list[float]] = {}
    for line in table.read_text().splitlines()[1:]:
        site, _, v = line.split("\t")
        per_site.setdefault(site, []).append(float(v))
    n = min(len(v) for v in per_site.values())
    variances = {s: float(np.var(v)) for s, v in per_site.items()}
    spread = {s: max(v) / min(v) for s, v in per_site.items()}
    ok = n >= 16 and any(v > 0 for v in variances.values())
    top = max(spread, key=spread.get)
    verdict(9, ok, f"{n} samples, {sum(v > 0 for v in variances.values())}/{len(variances)} sites with "
                   f"positive variance; widest max/min ratio {spread[top]:.2f} at {top}")
