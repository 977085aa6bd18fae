# One bundle of semantic IDs per item: textual, audio and joint streams
#
# The joint stream quantizes [textual, audio] after scaling each modality
# row to unit length, so neither modality dominates by scale.

import tempfile
from pathlib import Path

import numpy as np

from semid.pipeline import QuantizeConfig, build_joint, load_bundle, quantize_all, save_bundle
from semid.synth import SynthConfig, generate

data = generate(SynthConfig(n_users=10, n_items=300, dim=16))
joint = build_joint(data.textual, data.audio)
print("joint dim", joint.dim, "row norm^2 of first items",
      np.round((joint.values[:3].astype(float) ** 2).sum(1), 5))

cfg = QuantizeConfig(method="PSRQ", k=16, l=3, seed=0)
bundle = quantize_all(data.textual, data.audio, cfg)
for s in bundle.streams:
    print(f"{s:8s} codebook dims {bundle.codebooks[s].layer_dims}  item 0 -> {bundle.tables[s].as_dict()[0]}")

# Without audio the joint stream is simply the textual stream.
solo = quantize_all(data.textual, None, cfg)
print("single-modality streams:", solo.streams,
      "joint == textual:", bool((solo.tables["joint"].codes == solo.tables["textual"].codes).all()))

# Files are named by the config hash; the manifest lists them.
with tempfile.TemporaryDirectory() as tmp:
    manifest = save_bundle(bundle, Path(tmp) / "bundle")
    print(sorted(p.name for p in manifest.parent.iterdir()))
    back = load_bundle(manifest)
    print("reloaded codes identical:",
          all((back.tables[s].codes == bundle.tables[s].codes).all() for s in bundle.streams))
