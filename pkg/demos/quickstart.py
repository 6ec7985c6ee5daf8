"""Generate a tiny dataset, train all three stages and synthesize a free-view clip.

Runs in a few minutes on one CPU at 48x48. Output goes to ./quickstart_out.
"""
import json
import sys
from pathlib import Path

from emohead4d.cli import main

out = Path(sys.argv[1] if len(sys.argv) > 1 else "quickstart_out")
config = out / "config.toml"
out.mkdir(parents=True, exist_ok=True)
config.write_text("""
seed = 0
[data]
duration = 1.0
width = 48
height = 48
[s2g]
iterations = 400
hidden = 64
[canonical]
otf_count = 400
[canonical.train]
iterations = 300
[dynamic]
frame_stride = 3
[dynamic.train]
iterations = 300
""")


def run(*args):
    rc = main([*args, "--config", str(config)])
    if rc:
        sys.exit(rc)


data, run_dir = out / "data", out / "run"
run("gen-data", "--out", str(data), "--emotions", "neutral,happy_strong,angry_strong,sad_strong,surprised_strong")
for stage in ("s2g", "canonical", "dynamic"):
    run("train", "--stage", stage, "--data", str(data), "--out", str(run_dir))

# drive the trained head with the audio of a test clip, switching emotion halfway
test_clip = data / json.loads((data / "split.json").read_text())["test"][0]
timeline = out / "timeline.json"
timeline.write_text(json.dumps([{"start_frame": 0, "label": "neutral", "intensity": "strong"},
                                {"start_frame": 12, "label": "happy", "intensity": "strong"}]))
run("synth", "--run", str(run_dir), "--audio", str(test_clip / "audio.wav"), "--emotions", str(timeline),
    "--out", str(out / "synth"))
print("frames in", out / "synth")
