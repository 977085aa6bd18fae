# The eight-row comparison table
#
# Rows: an ID-only baseline, the baseline plus textual semantic IDs from
# each quantizer, the full multimodal model, and the model without its
# modality-specific streams (w/o MSC) or without the shared joint query
# (w/o MJC). Takes a couple of minutes.

import time

from semid.experiment import ExperimentConfig, ModelSettings, prepare, sweep
from semid.metrics import report
from semid.pipeline import QuantizeConfig
from semid.synth import SynthConfig, generate
from semid.trainer import TrainConfig

t0 = time.perf_counter()
data = generate(SynthConfig(n_users=2000, n_items=500))
prep = prepare(data.textual, data.audio, data.train, data.test, max_len=20, cold_threshold=30)
cfg = ExperimentConfig(QuantizeConfig(k=16, l=3), ModelSettings(dim=16), TrainConfig(lr=0.003, epochs=3))
md, tsv = report(sweep(prep, cfg))
print(md)
print(f"{time.perf_counter() - t0:.0f}s")
