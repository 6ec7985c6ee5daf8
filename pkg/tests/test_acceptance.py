"""End-to-end acceptance checks. Each criterion reports one PASS/FAIL line in the terminal summary."""
import hashlib
import json
import shutil
import subprocess
import sys
import time
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import record
from emohead4d.cli import EXIT_OK, main
from emohead4d.completion import fusion_weight, propagate_motion
from emohead4d.config import RunConfig
from emohead4d.datagen import BASES, HeadModelConfig, SyntheticRig, build_template, proxy_cloud
from emohead4d.g2a import (CanonicalConfig, assemble_dynamic_frame, compute_delta_mu, facial_points_from_geometry,
                           head_bounds, init_g2a, init_head_cloud, load_canonical, load_g2a, render_frame,
                           train_canonical)
from emohead4d.metrics import lmd, project_landmarks, psnr, ssim
from emohead4d.pipeline import clip_features, embedding_table, evaluate_models, load_models, run_stage, split_clips
from emohead4d.rasterizer import render, render_oracle
from emohead4d.s2g import load_s2g, per_vertex_rmse, predict_batch
from scenes import random_scene, scene_camera

TESTS = Path(__file__).parent
EMOTIONS = ["neutral", "happy_strong", "angry_strong"]
RUN_CONFIG = {
    "seed": 0,
    "s2g": {"iterations": 2500, "log_every": 0},
    "canonical": {"otf_count": 1000, "train": {"iterations": 1500, "log_every": 0}},
    "dynamic": {"frame_stride": 2, "train": {"iterations": 1500, "log_every": 0}},
}


def checked(criterion, fn):
    """Run ``fn() -> (ok, detail)``, record the outcome, fail the test when not ok."""
    try:
        ok, detail = fn()
    except Exception as exc:
        record(criterion, False, f"{type(exc).__name__}: {exc}")
        raise
    record(criterion, ok, detail)
    assert ok, detail


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# shared pipeline run: 10 clips of 2 s, 8 train / 2 test

@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc") / "data"
    emotions = ",".join(EMOTIONS[k % 3] for k in range(10))
    rc = main(["gen-data", "--out", str(root), "--emotions", emotions, "--clips-per-emotion", "1",
               "--duration", "2.0", "--size", "64", "--seed", "0"])
    assert rc == EXIT_OK
    return root


@pytest.fixture(scope="module")
def runs(dataset):
    base = dataset.parent
    cfg = RunConfig.from_dict(RUN_CONFIG)
    full = base / "full"
    t0 = time.perf_counter()
    run_stage("s2g", dataset, full, cfg, log=lambda *_: None)
    s2g_time = time.perf_counter() - t0
    run_stage("canonical", dataset, full, cfg, log=lambda *_: None)
    canon_digest = digest(full / "canonical.ckpt")
    run_stage("dynamic", dataset, full, cfg, log=lambda *_: None)

    noemo = base / "no_emotion"
    run_stage("s2g", dataset, noemo, RunConfig.from_dict(dict(RUN_CONFIG, no_emotion=True)), log=lambda *_: None)

    nofeat = base / "no_featurenet"
    nofeat.mkdir()
    for name in ("s2g.ckpt", "canonical.ckpt"):
        shutil.copy(full / name, nofeat / name)
    run_stage("dynamic", dataset, nofeat, RunConfig.from_dict(dict(RUN_CONFIG, no_featurenet=True)),
              log=lambda *_: None)
    return {"data": dataset, "full": full, "no_emotion": noemo, "no_featurenet": nofeat,
            "canonical_digest": canon_digest, "s2g_time": s2g_time}


# --------------------------------------------------------------------------
# 1. rasterizer against the per-pixel oracle

def test_criterion_1_oracle_equivalence():
    def run():
        t0 = time.perf_counter()
        worst = 0.0
        for seed in range(50):
            rng = np.random.default_rng(10_000 + seed)
            cl = random_scene(rng, int(rng.integers(1, 201)), opacity=(0.02, 0.99), sh_scale=0.3)
            cam = scene_camera(64, rng=rng)
            bg = rng.uniform(0, 1, 3)
            a, b = render(cl, cam, bg), render_oracle(cl, cam, bg)
            worst = max(worst, float(np.abs(a.rgb - b.rgb).max()), float(np.abs(a.alpha - b.alpha).max()))
        dt = time.perf_counter() - t0
        return worst <= 1e-5 and dt < 120, f"max abs err {worst:.2e} over 50 scenes, {dt:.1f}s"
    checked(1, run)


# --------------------------------------------------------------------------
# 2. finite-difference gradient suite

GRADIENT_GROUPS = {
    "rasterizer": ("test_backward_fd_small_scenes", "test_backward_fd_seeds", "test_full_frame_gradient_fd"),
    "mlp": ("test_mlp_fd", "test_feature_net_fd", "test_rotation_net_fd"),
    "gru": ("test_gru_fd", "test_forward_backward_fd"),
    "loss": ("test_photometric_fd", "test_ssim_grad_fd_grayscale"),
}


def test_criterion_2_gradient_suite(tmp_path):
    def run():
        xml = tmp_path / "fd.xml"
        files = [str(TESTS / f) for f in ("test_rasterizer.py", "test_autodiff.py", "test_g2a.py", "test_s2g.py",
                                           "test_core.py")]
        t0 = time.perf_counter()
        proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", "-k", "fd",
                               f"--junitxml={xml}", *files], capture_output=True, text=True, cwd=TESTS.parent)
        dt = time.perf_counter() - t0
        cases = ET.parse(xml).getroot().iter("testcase")
        passed, failed = {}, []
        for c in cases:
            fn = c.get("name").split("[")[0]
            if any(ch.tag in ("failure", "error", "skipped") for ch in c):
                failed.append(c.get("name"))
            else:
                passed[fn] = passed.get(fn, 0) + 1
        counts = {g: sum(passed.get(fn, 0) for fn in fns) for g, fns in GRADIENT_GROUPS.items()}
        ok = proc.returncode == 0 and not failed and min(counts.values()) >= 20 and dt < 300
        return ok, f"{sum(passed.values())} FD checks passed, {len(failed)} failed; per path {counts}; {dt:.0f}s"
    checked(2, run)


# --------------------------------------------------------------------------
# 3. canonical fit on a static 8-view scene

TRAIN_VIEWS = [0, 1, 3, 4, 6, 7, 9, 10]
HELD_OUT = [2, 5, 8]


@pytest.fixture(scope="module")
def canonical_fit():
    hc = HeadModelConfig()
    tm = build_template(hc)
    cams = SyntheticRig(width=64, height=64).cameras()
    gt = proxy_cloud(hc, tm, tm.vertices, {b: 0.0 for b in BASES})
    imgs = [render(gt, c).rgb for c in cams]
    init = init_head_cloud(tm.vertices, tm.faces, tm.uv, 500 - len(tm.vertices), head_bounds(), seed=0)
    t0 = time.perf_counter()
    head = train_canonical([imgs[i] for i in TRAIN_VIEWS], [cams[i] for i in TRAIN_VIEWS], init,
                           CanonicalConfig(iterations=1500, log_every=0))
    dt = time.perf_counter() - t0
    scores = [psnr(render(head.cloud, cams[i]).rgb, imgs[i]) for i in HELD_OUT]
    return {"head": head, "init": init, "scores": scores, "time": dt}


def test_criterion_3_canonical_fit(canonical_fit):
    def run():
        f = canonical_fit
        n0, n1 = len(f["init"]), len(f["head"].cloud)
        ok = n0 == 500 and n1 == n0 and min(f["scores"]) >= 30.0 and f["time"] < 900
        return ok, (f"held-out PSNR {', '.join(f'{s:.2f}' for s in f['scores'])} dB; "
                    f"{n0} -> {n1} points; 1500 iters, {f['time']:.0f}s")
    checked(3, run)


def test_canonical_loss_windows_mostly_nonincreasing(canonical_fit):
    losses = np.asarray(canonical_fit["head"].losses)
    w = 50
    means = losses[: len(losses) // w * w].reshape(-1, w).mean(axis=1)
    assert np.mean(np.diff(means) <= 0) >= 0.95


# --------------------------------------------------------------------------
# 4. closed forms

def test_criterion_4_closed_forms():
    def run():
        rng = np.random.default_rng(4)
        mu_o = rng.normal(size=(200, 3))
        mu_t = mu_o + rng.normal(size=(200, 3)) + np.array([3.0, -1.0, 2.0])
        d = compute_delta_mu(mu_t, mu_o)
        centered = np.allclose(d, (mu_t - mu_o) - (mu_t - mu_o).mean(axis=0), rtol=0, atol=1e-12)
        sum_zero = float(np.abs(d.sum(axis=0)).max())
        delta = rng.normal(size=(50, 3))
        ident = np.array_equal(propagate_motion(delta, np.zeros(50)), delta)
        decay = float(np.abs(propagate_motion(delta, np.full(50, 10.0)) - delta * np.exp(-1.0)).max())
        fw = fusion_weight(np.array([3.0, 10.0, 20.0]))
        exact = np.array_equal(fw, [0.0, 0.5, 1.0])
        ok = centered and sum_zero < 1e-12 and ident and decay <= 1e-12 and exact
        return ok, (f"centering {centered}, |sum| {sum_zero:.1e}; d=0 identity {ident}, d=10 err {decay:.1e}; "
                    f"fusion {fw.tolist()}")
    checked(4, run)


# --------------------------------------------------------------------------
# 5. canonical reproduction and frozen fields

def test_criterion_5_canonical_reproduction(runs):
    def run():
        full = runs["full"]
        head, _ = load_canonical(full / "canonical.ckpt")
        cams = SyntheticRig(width=64, height=64).cameras()
        rng = np.random.default_rng(5)
        repro = 0.0
        for cam in cams:
            weights = init_g2a(rng)
            dyn = assemble_dynamic_frame(head, head.cloud.positions, rng.normal(size=16), weights)
            diff = np.abs(render(dyn.cloud, cam).rgb - render(head.cloud, cam).rgb).max()
            repro = max(repro, float(diff))

        models = load_models(full)
        base = models.head.cloud
        frozen = digest(full / "canonical.ckpt") == runs["canonical_digest"]
        for c in split_clips(runs["data"], "test"):
            for t in (0, c.n_frames // 2, c.n_frames - 1):
                facial = facial_points_from_geometry(c.geometry.vertices[t], models.template.faces)
                _, fused, dyn = render_frame(models.head, models.completion, facial,
                                             models.embedding(c.timeline.labels[t]), models.g2a, cams[5])
                n = len(base)
                for cl in (dyn.cloud, fused.subset(np.arange(n)), fused.subset(np.arange(n, 2 * n))):
                    frozen &= cl.log_scales.tobytes() == base.log_scales.tobytes()
                    frozen &= cl.opacity_logits.tobytes() == base.opacity_logits.tobytes()
        return repro <= 1e-6 and frozen, f"reproduction max err {repro:.1e}; S/alpha bit-equal {frozen}"
    checked(5, run)


# --------------------------------------------------------------------------
# 6. S2G overfit

def test_criterion_6_s2g_overfit(runs):
    def run():
        w, template, cfg, _ = load_s2g(runs["full"] / "s2g.ckpt")
        def errors(which):
            pred, base = [], []
            for c in split_clips(runs["data"], which):
                f = clip_features(c).frames
                p = predict_batch(w, template, f[None], c.timeline.labels[None], cfg.no_emotion)[0]
                pred.append(per_vertex_rmse(p, c.geometry.vertices))
                base.append(per_vertex_rmse(template.vertices[None], c.geometry.vertices))
            return np.array(pred), np.array(base)
        tr, _ = errors("train")
        te, te_base = errors("test")
        gain = float(te_base.mean() / te.mean())
        ok = tr.max() < 1e-3 and gain >= 5.0 and runs["s2g_time"] < 1200
        return ok, (f"train RMSE max {tr.max():.2e}; held-out {te.mean():.2e} vs baseline {te_base.mean():.2e} "
                    f"({gain:.1f}x); {runs['s2g_time']:.0f}s")
    checked(6, run)


# --------------------------------------------------------------------------
# 7. ablation directionality

def _landmark_error(run_dir, clips, cam_index=5):
    w, template, cfg, _ = load_s2g(run_dir / "s2g.ckpt")
    errs = []
    for c in clips:
        f = clip_features(c).frames
        p = predict_batch(w, template, f[None], c.timeline.labels[None], cfg.no_emotion)[0]
        cam = c.cameras[cam_index]
        errs += [lmd(project_landmarks(cam, p[t], c.landmarks), project_landmarks(cam, c.geometry.vertices[t],
                                                                                  c.landmarks))
                 for t in range(c.n_frames)]
    return float(np.mean(errs))


def test_criterion_7_ablations(runs):
    def run():
        test = split_clips(runs["data"], "test")
        lmd_full = _landmark_error(runs["full"], test)
        lmd_noemo = _landmark_error(runs["no_emotion"], test)
        p_full = evaluate_models(load_models(runs["full"]), test, 5).aggregate()["psnr"]
        p_nofeat = evaluate_models(load_models(runs["no_featurenet"]), test, 5).aggregate()["psnr"]
        ok = lmd_full < lmd_noemo and p_full > p_nofeat
        return ok, (f"LMD full {lmd_full:.4f} vs no-emotion {lmd_noemo:.4f} (margin {lmd_noemo - lmd_full:+.4f}); "
                    f"PSNR full {p_full:.3f} vs no-featurenet {p_nofeat:.3f} (margin {p_full - p_nofeat:+.3f})")
    checked(7, run)


def test_no_emotion_embeddings_are_zero(runs):
    w, _, cfg, _ = load_s2g(runs["no_emotion"] / "s2g.ckpt")
    assert cfg.no_emotion
    assert not embedding_table(w, cfg.no_emotion).any()
    _, _, gcfg, _ = load_g2a(runs["no_featurenet"] / "dynamic.ckpt")
    assert gcfg.no_featurenet


# --------------------------------------------------------------------------
# 8. end-to-end determinism

def test_criterion_8_synth_determinism(runs, tmp_path):
    def run():
        clip = split_clips(runs["data"], "test")[0]
        outs = []
        for k in range(2):
            out = tmp_path / f"synth{k}"
            rc = main(["synth", "--run", str(runs["full"]), "--audio", str(clip.path / "audio.wav"),
                       "--emotions", "happy_strong", "--seed", "0", "--out", str(out)])
            assert rc == EXIT_OK
            outs.append(out)
        index = json.loads((outs[0] / "index.json").read_text())
        files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
        same = files == sorted(p.relative_to(outs[1]) for p in outs[1].rglob("*") if p.is_file())
        same &= all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
        cover = min(index["alpha_coverage"])
        ok = index["n_frames"] == 50 and same and cover > 0
        return ok, (f"{index['n_frames']} frames (expected 50), byte-identical {same}, "
                    f"min alpha coverage {cover:.3f}")
    checked(8, run)


# --------------------------------------------------------------------------
# 9. metric self-consistency

EXAMPLES = {"n": 0}
images = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s))


@settings(max_examples=120, deadline=None)
@given(images)
def _metric_properties(rng):
    EXAMPLES["n"] += 1
    a = rng.uniform(0, 1, (16, 16, 3))
    b = rng.uniform(0, 1, (16, 16, 3))
    noise = rng.normal(0, 1, a.shape)
    assert psnr(a, a) == 100.0 and ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert psnr(a, b) == psnr(b, a) and ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    s1, s2 = sorted(rng.uniform(0.01, 0.2, 2))
    if s2 - s1 > 1e-3:
        assert psnr(a, a + s1 * noise) > psnr(a, a + s2 * noise)
        assert ssim(a, a + s1 * noise) > ssim(a, a + s2 * noise)
    p = rng.uniform(0, 64, (12, 2))
    d = rng.normal(size=(12, 2))
    assert lmd(p, p) == 0.0 and lmd(p, p + d) == pytest.approx(lmd(p + d, p), abs=1e-12)
    assert lmd(p, p + s1 * d) < lmd(p, p + s2 * d) or s2 - s1 <= 1e-3


def test_criterion_9_metric_properties():
    def run():
        _metric_properties()
        return EXAMPLES["n"] >= 100, f"{EXAMPLES['n']} generated cases: identity, symmetry, monotonicity"
    checked(9, run)
