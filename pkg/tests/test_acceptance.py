"""Acceptance criteria 1-9, each at its stated tolerance and time budget.

Every test records one PASS/FAIL line; pytest shows them in an
"acceptance criteria" section at the end of the run.
"""
import json
import os
import subprocess
import sys
import textwrap
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import central_differences
from protofaith import cli
from protofaith.core.engine import backward_input, forward
from protofaith.fixtures import gen_false_bias, gen_flat, gen_planted, gen_random
from protofaith.metrics import (
    FillPolicy,
    area_grid,
    deletion_curve,
    erf_estimate,
    locate,
    perturb,
    relevance,
    similarity_ratio,
)
from protofaith.model import LOG_RATIO, NEG_EXP
from protofaith.saliency import compute_saliency, prp_relevance, top_fraction_mask


def _report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _simfn(seed):
    return NEG_EXP if seed % 2 == 0 else LOG_RATIO


def test_criterion_1_audc_anchor():
    data = gen_flat(0)
    t0 = time.perf_counter()
    curve = deletion_curve(data.bundle, data.images[0], 0, "prp", 0.02, 0.001)
    elapsed = time.perf_counter() - t0
    err = abs(curve.audc - 200.0)
    ok = np.all(curve.ratios == 1.0) and err <= 1e-9 and elapsed < 1.0
    _report(1, ok, f"AUDC={curve.audc!r} |err|={err:.1e} (tol 1e-9), {elapsed:.3f}s (< 1s)")


def test_criterion_2_gradient_correctness():
    t0 = time.perf_counter()
    worst, skipped, total = 0.0, 0, 0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        size = int(rng.integers(6, 17))
        data = gen_random(seed, (size, size), max_layers=3, n_images=1, n_prototypes=1)
        x = data.images[0]
        trace = forward(data.bundle.backbone, x)
        g = rng.normal(size=trace.output.shape)
        got = backward_input(trace, g)
        fd, kink = central_differences(data.bundle.backbone, x, g)
        ok = ~kink
        skipped += int(kink.sum())
        total += kink.size
        if not ok.any():
            continue
        scale = np.abs(fd[ok]).max()
        denom = np.maximum(np.abs(fd[ok]), 1e-6 * scale + 1e-300)
        worst = max(worst, float(np.max(np.abs(got[ok] - fd[ok]) / denom)))
    elapsed = time.perf_counter() - t0
    frac = skipped / total
    ok = worst < 1e-3 and frac < 0.05 and elapsed < 30
    _report(2, ok, f"max rel err={worst:.2e} (< 1e-3), kink-skipped inputs={100 * frac:.2f}%, {elapsed:.1f}s (< 30s)")


def test_criterion_3_conservation():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        data = gen_random(seed, (16, 16), positive=True, bias=False, n_images=1, n_prototypes=1)
        x = data.images[0]
        target = locate(data.bundle, x, 0)
        rel = prp_relevance(data.bundle, x, (0, target.h, target.w))
        worst = max(worst, abs(float(rel.astype(np.float64).sum()) - target.score) / target.score)
    elapsed = time.perf_counter() - t0
    _report(3, worst < 0.05 and elapsed < 30, f"max |sum R - s|/s={worst:.2e} (< 5%), {elapsed:.1f}s (< 30s)")


def test_criterion_4_locality():
    t0 = time.perf_counter()
    disjoint_ok, below, erf_ok = True, [], []
    for seed in range(20):
        fx = gen_planted(seed, simfn=_simfn(seed))
        model, x = fx.bundle, fx.image
        fill = FillPolicy("mean", fx.fill_values)
        target = locate(model, x, 0)
        rng = np.random.default_rng(seed)
        outside = np.flatnonzero(~fx.region_mask.ravel())
        for frac in (0.001, 0.02, 0.1, 0.5):
            pick = rng.choice(outside, size=max(1, int(frac * x[0].size)), replace=False)
            mask = np.zeros(x[0].size, bool)
            mask[pick] = True
            disjoint_ok &= similarity_ratio(model, perturb(x, mask.reshape(x.shape[1:]), fill), target) == 1.0
        mask = np.zeros(x[0].size, bool)
        mask[outside] = True
        disjoint_ok &= similarity_ratio(model, perturb(x, mask.reshape(x.shape[1:]), fill), target) == 1.0
        # the top a = |R|/N pixels of the oracle saliency are exactly R
        oracle = compute_saliency(model, x, (0, target.h, target.w), "occlusion", fill=fill)
        top = top_fraction_mask(oracle, fx.region_fraction)
        disjoint_ok &= bool(np.array_equal(top.mask, fx.region_mask))
        below.append(similarity_ratio(model, perturb(x, top, fill), target))
        est = erf_estimate(model, x, 0, "occlusion", fill=fill, target=target)
        erf_ok.append(est.area is not None and abs(est.area - fx.region_fraction) <= 0.005 + 1e-12)
    elapsed = time.perf_counter() - t0
    ok = disjoint_ok and max(below) < 0.1 and all(erf_ok) and elapsed < 60
    _report(
        4,
        ok,
        f"disjoint masks tau==1 and oracle top-|R|/N mask == R: {disjoint_ok}; max tau(R)={max(below):.4f} (< 0.1); "
        f"ERF within one step: {sum(erf_ok)}/20; {elapsed:.1f}s (< 60s)",
    )


def test_criterion_5_method_ordering():
    t0 = time.perf_counter()
    scores = {"occlusion": [], "prp": [], "upsample": []}
    for seed in range(20):
        fx = gen_planted(seed, simfn=_simfn(seed))
        fill = FillPolicy("mean", fx.fill_values)
        target = locate(fx.bundle, fx.image, 0)
        for method in scores:
            curve = deletion_curve(fx.bundle, fx.image, 0, method, 0.02, 0.001, fill, seed=seed, target=target)
            scores[method].append(curve.audc)
    elapsed = time.perf_counter() - t0
    mean = {m: float(np.mean(v)) for m, v in scores.items()}
    strict = float(np.mean(np.array(scores["prp"]) < np.array(scores["upsample"])))
    ok = mean["occlusion"] <= mean["prp"] <= mean["upsample"] and strict >= 0.9 and elapsed < 120
    _report(
        5,
        ok,
        f"mean AUDC oracle={mean['occlusion']:.1f} <= PRP={mean['prp']:.1f} <= upsampling={mean['upsample']:.1f}; "
        f"PRP < upsampling in {100 * strict:.0f}% of seeds (>= 90%); {elapsed:.1f}s (< 120s)",
    )


def test_criterion_6_false_bias():
    t0 = time.perf_counter()
    results = []
    for seed in range(5):
        fx = gen_false_bias(seed)
        target = (0, *fx.cell)
        up = relevance(compute_saliency(fx.bundle, fx.image, target, "upsample"), fx.segmentation)
        prp = relevance(compute_saliency(fx.bundle, fx.image, target, "prp"), fx.segmentation)
        again = relevance(compute_saliency(fx.bundle, fx.image, target, "prp"), fx.segmentation)
        results.append((up.fraction, prp.fraction, up.irrelevant and not prp.irrelevant and again == prp))
    elapsed = time.perf_counter() - t0
    ok = all(r[2] for r in results) and elapsed < 10
    detail = ", ".join(f"seed {s}: up={u:.3f} prp={p:.3f}" for s, (u, p, _) in enumerate(results))
    _report(6, ok, f"upsampling < 5% and PRP >= 5% on {sum(r[2] for r in results)}/5 fixtures ({detail}); {elapsed:.2f}s (< 10s)")


def _tree(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for n in sorted(names):
            p = os.path.join(dirpath, n)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


def _cli_session(root):
    fx = os.path.join(root, "fx")
    runs = [
        ["gen-fixture", "--kind", "planted", "--seed", "7", "--out", fx],
        ["gen-fixture", "--kind", "random", "--seed", "7", "--out", os.path.join(root, "rnd")],
        ["eval-deletion", f"{fx}/bundle.pxeb", f"{fx}/manifest.json", "--method", "upsample,smoothgrads,prp,random", "--seed", "7", "--out", os.path.join(root, "del")],
        ["eval-relevance", f"{fx}/bundle.pxeb", f"{fx}/manifest.json", "--seed", "7", "--out", os.path.join(root, "rel")],
        ["erf", f"{fx}/bundle.pxeb", f"{fx}/manifest.json", "--seed", "7", "--out", os.path.join(root, "erf")],
        ["explain", f"{fx}/bundle.pxeb", f"{fx}/images/planted.ppm", "--manifest", f"{fx}/manifest.json", "--method", "upsample,prp,smoothgrads", "--seed", "7", "--out", os.path.join(root, "ex")],
        ["project", f"{root}/rnd/bundle.pxeb", f"{root}/rnd/manifest.json", "--out", os.path.join(root, "proj.pxeb")],
    ]
    return [cli.main(args) for args in runs]


def test_criterion_7_determinism(tmp_path, capsys):
    codes_a = _cli_session(str(tmp_path / "a"))
    codes_b = _cli_session(str(tmp_path / "b"))
    capsys.readouterr()
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = codes_a == codes_b == [0] * len(codes_a) and not differing and len(a) > 10
    _report(7, ok, f"{len(a)} output files over {len(codes_a)} commands, differing: {differing or 'none'}")


def test_criterion_8_protocol_fidelity(tmp_path, capsys):
    fx = tmp_path / "fx"
    cli.main(["gen-fixture", "--out", str(fx)])
    cli.main(["eval-deletion", str(fx / "bundle.pxeb"), str(fx / "manifest.json"), "--out", str(tmp_path / "r")])
    capsys.readouterr()
    params = json.loads((tmp_path / "r" / "summary.json").read_text())["parameters"]
    expected = {
        "deletion_amax": 0.02,
        "deletion_step": 0.001,
        "amax": 0.02,
        "step": 0.001,
        "patch_fraction": 0.02,
        "relevance_threshold": 0.05,
        "smoothgrad_samples": 10,
        "noise_ratio": 0.2,
    }
    got = {k: params.get(k) for k in expected}
    grid_points = len(area_grid(params["amax"], params["step"]))
    ok = got == expected and grid_points == 21
    _report(8, ok, f"echoed {got}, grid points={grid_points}")


PERF_SCRIPT = textwrap.dedent(
    """
    import json, time
    import numpy as np
    from protofaith.core.engine import Conv2d, ReLU
    from protofaith.metrics import FillPolicy, deletion_curve
    from protofaith.model import ModelBundle, PrototypeSet, SimilarityFunction, TargetPolicy, project_prototypes

    rng = np.random.default_rng(0)
    chans = [3, 16, 32, 32, 64]
    layers = []
    for cin, cout in zip(chans[:-1], chans[1:]):
        layers.append(Conv2d(rng.normal(0, (2.0 / (9 * cin)) ** 0.5, size=(cout, cin, 3, 3)), np.zeros(cout), stride=2, padding=1))
        layers.append(ReLU())
    x = rng.uniform(0, 1, size=(3, 224, 224)).astype(np.float32)
    model = ModelBundle(tuple(layers), PrototypeSet(rng.normal(size=(2, 64))), SimilarityFunction("log_ratio"),
                        (3, 224, 224), np.ones((1, 2)), TargetPolicy("protopnet_top10"))
    model = project_prototypes(model, [x], ["img"])
    out = {}
    for method in ("upsample", "smoothgrads", "prp"):
        t0 = time.perf_counter()
        curve = deletion_curve(model, x, 0, method, 0.02, 0.001, FillPolicy.resolve("gray"))
        out[method] = [time.perf_counter() - t0, len(curve.areas)]
    print(json.dumps(out))
    """
)


def test_criterion_9_performance():
    env = dict(os.environ)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "PROTOFAITH_THREADS"):
        env[var] = "1"
    proc = subprocess.run([sys.executable, "-c", PERF_SCRIPT], capture_output=True, text=True, env=env, timeout=300)
    assert proc.returncode == 0, proc.stderr
    res = json.loads(proc.stdout.strip().splitlines()[-1])
    ok = all(t < 5.0 and n == 21 for t, n in res.values())
    detail = ", ".join(f"{m}={t:.2f}s" for m, (t, _) in res.items())
    _report(9, ok, f"224x224, 4 conv layers, 21-point curve, single thread: {detail} (each < 5s)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
