# coding: utf-8

# # The command-line workflow
#
# Generate a scene on disk, fit it, render a new time, and export a PLY that
# point-cloud viewers can open. The `main` calls are the same as `splat4d <command> ...` in a shell.

# In[1]:

import json
import tempfile
from pathlib import Path

from splat4d.cli import main
from splat4d.formats import export_ply, load_model, read_ply

work = Path(tempfile.mkdtemp(prefix="splat4d_demo_"))
spec = {"seed": 3, "resolution": [24, 24], "n_frames": 3, "n_tracks": 64}
(work / "spec.json").write_text(json.dumps(spec))

main(["gen", "--spec", str(work / "spec.json"), "--out", str(work / "scene")])
(work / "fit.json").write_text(json.dumps({"iterations": 200}))
main(["fit", "--scene", str(work / "scene"), "--config", str(work / "fit.json"), "--out", str(work / "model.fit")])


# In[2]:

main(["render", "--model", str(work / "model.fit"), "--camera", "1", "--time", "0.5", "--out", str(work / "t05.png")])

# There is no export subcommand; the PLY writer is a library call.
model = load_model(work / "model.fit")
export_ply(model, 0.5, work / "t05.ply")
ply = read_ply(work / "t05.ply")
print(model.n_gaussians, "Gaussians;", len(ply["x"]), "vertices in the PLY")
print("outputs in", work)
