import json
import shutil

import numpy as np
import pytest

from emohead4d.datagen import (BASES, ClipConfig, HeadModelConfig, SyntheticRig, build_template, clip_signals,
                               generate_clip, generate_dataset, list_clips, load_cameras, load_clip, proxy_cloud,
                               split_dataset, validate_dataset)
from emohead4d.emotion import class_index
from emohead4d.geometry import GeometrySequence
from emohead4d.mesh import vertex_normals
from emohead4d.rasterizer import render
from emohead4d.s2g import ConfigurationError

SMALL = SyntheticRig(width=32, height=32)


@pytest.fixture(scope="module")
def clip_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("clip") / "angry_strong_s007"
    generate_clip(d, ClipConfig("angry strong", duration=0.2, seed=7, rig=SMALL))
    return d


def test_rig_geometry():
    rig = SyntheticRig()
    cams = rig.cameras()
    assert len(cams) == 11 and (cams[0].width, cams[0].height) == (512, 512)
    az = np.array(rig.azimuths())
    assert az[0] == -90 and az[-1] == 90 and np.allclose(np.diff(az), 18.0)
    for c in cams:
        uv, z = c.project(np.asarray(rig.target)[None])
        assert z[0] > 0 and np.abs(uv[0] - [c.cx, c.cy]).max() <= 0.5
        assert np.isclose(np.linalg.norm(c.center - rig.target), rig.radius)


def test_frame_counts_and_layout(clip_dir):
    m = json.loads((clip_dir / "manifest.json").read_text())
    assert m["n_frames"] == 5 and m["n_cameras"] == 11
    for k in range(11):
        assert len(list((clip_dir / "frames" / f"cam{k:02d}").glob("*.png"))) == 5
    for name in ("cameras.json", "geometry.bin", "audio.wav", "emotions.json", "landmarks.json"):
        assert (clip_dir / name).exists()
    assert GeometrySequence.load(clip_dir / "geometry.bin").n_frames == 5


def test_two_second_clip_counts():
    sig = clip_signals(ClipConfig(duration=2.0, fps=25.0))
    assert sig["n_frames"] == 50 and sig["vertices"].shape[0] == 50


def test_angry_moves_brows_neutral_does_not():
    hc = HeadModelConfig()
    tm = build_template(hc)
    neutral = clip_signals(ClipConfig("neutral", duration=0.4, seed=1))
    angry = clip_signals(ClipConfig("angry strong", duration=0.4, seed=1))
    # brows sit in the upper part of the face chart
    brow = tm.uv[:, 1] > 0.7
    disp_n = np.abs(neutral["vertices"][:, brow] - tm.vertices[brow]).max()
    disp_a = np.abs(angry["vertices"][:, brow] - tm.vertices[brow]).max()
    assert disp_n < 1e-9 < 1e-4 < disp_a


def test_determinism(tmp_path, clip_dir):
    other = tmp_path / "again"
    generate_clip(other, ClipConfig("angry strong", duration=0.2, seed=7, rig=SMALL))
    for name in ("geometry.bin", "audio.wav", "cameras.json", "frames/cam05/000003.png"):
        assert (other / name).read_bytes() == (clip_dir / name).read_bytes()


def test_roundtrip(clip_dir):
    clip = load_clip(clip_dir)
    sig = clip_signals(clip.config())
    assert np.array_equal(clip.geometry.vertices, sig["vertices"].astype(np.float32).astype(np.float64))
    cams = SMALL.cameras()
    for a, b in zip(clip.cameras, cams):
        assert a.to_dict() == b.to_dict()
    assert list(clip.timeline.labels) == [class_index("angry", "strong")] * 5
    wav, sr = clip.audio()
    assert np.array_equal(wav, sig["waveform"])
    assert clip.image(3, 2).shape == (32, 32, 3)


def test_landmarks_project_inside_every_camera(clip_dir):
    clip = load_clip(clip_dir)
    for cam in clip.cameras:
        for v in clip.geometry.vertices:
            uv, z = cam.project(v[clip.landmarks])
            assert (z > 0).all()
            assert (uv >= 0).all() and (uv[:, 0] < cam.width).all() and (uv[:, 1] < cam.height).all()


def test_multiview_color_consistency():
    rig = SyntheticRig(width=128, height=128)
    cams = rig.cameras()
    hc = HeadModelConfig()
    tm = build_template(hc)
    imgs = [render(proxy_cloud(hc, tm, tm.vertices, {b: 0.0 for b in BASES}), c).rgb for c in cams]
    n = vertex_normals(tm.vertices, tm.faces)
    for k in (4, 6):
        diffs = []
        for v, nv in zip(tm.vertices, n):
            pair = (cams[5], cams[k])
            if min(nv @ ((c.center - v) / np.linalg.norm(c.center - v)) for c in pair) < 0.7:
                continue
            cols = []
            for idx, c in ((5, pair[0]), (k, pair[1])):
                uv, _ = c.project(v[None])
                cols.append(imgs[idx][int(uv[0, 1]), int(uv[0, 0])])
            diffs.append(np.abs(cols[0] - cols[1]).max())
        assert len(diffs) > 20
        assert np.median(diffs) < 0.03 and np.quantile(diffs, 0.9) < 0.08


def test_validate_fresh_and_corrupted(tmp_path, clip_dir):
    assert validate_dataset(clip_dir) == {"ok": True, "clips": 1, "errors": []}
    bad = tmp_path / "bad"
    shutil.copytree(clip_dir, bad)
    (bad / "frames" / "cam04" / "000002.png").unlink()
    data = bytearray((bad / "geometry.bin").read_bytes())
    data[:4] = b"XXXX"
    (bad / "geometry.bin").write_bytes(bytes(data))
    rep = validate_dataset(bad)
    kinds = {e["kind"] for e in rep["errors"]}
    assert not rep["ok"] and {"missing_frame", "format"} <= kinds
    assert any(e["detail"] == "cam04/000002.png" for e in rep["errors"])


def test_validate_missing_manifest(tmp_path):
    rep = validate_dataset(tmp_path)
    assert not rep["ok"] and rep["errors"][0]["kind"] == "manifest"


def test_split():
    clips = [f"c{i}" for i in range(10)]
    s = split_dataset(clips, seed=3)
    assert len(s["train"]) == 8 and len(s["test"]) == 2
    assert not set(s["train"]) & set(s["test"])
    assert set(s["train"]) | set(s["test"]) == set(clips)
    assert split_dataset(clips, seed=3) == s
    with pytest.raises(ConfigurationError):
        split_dataset(clips[:4])


def test_generate_dataset_manifest(tmp_path):
    names = generate_dataset(tmp_path, ["neutral", "happy mild"], duration=0.08,
                             rig=SyntheticRig(n_cameras=11, width=16, height=16), clips_per_emotion=1, seed=2)
    assert names == ["neutral_s2000", "happy_mild_s2001"]
    assert [p.name for p in list_clips(tmp_path)] == names
    assert validate_dataset(tmp_path)["ok"]
    assert len(load_cameras(tmp_path / names[0] / "cameras.json")) == 11
