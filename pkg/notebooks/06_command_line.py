# Driving every stage from the command line
#
# `python -m semid <command> --config run.toml` runs one stage; `pipeline`
# runs them all. Logs are JSON lines on stderr, artifacts land under the
# output directory, and a failure exits with a stage-specific code.

import subprocess
import sys
import tempfile
from pathlib import Path

CONFIG = """
[synth]
n_users = 200
n_items = 80

[quantize]
k = 8

[model]
dim = 8

[train]
lr = 0.003

[report]
rows = ["ID-only", "+PSRQ", "PSRQ+MCCA"]
"""


def semid(*args):
    r = subprocess.run([sys.executable, "-m", "semid", *args], capture_output=True, text=True)
    return r.returncode, r.stdout, r.stderr


with tempfile.TemporaryDirectory() as tmp:
    cfg = Path(tmp) / "run.toml"
    cfg.write_text(CONFIG)
    code, out, err = semid("pipeline", "--config", str(cfg), "--threads", "2")
    print("exit", code)
    print(out)
    for p in sorted((Path(tmp) / "out").rglob("*")):
        if p.is_file():
            print(" ", p.relative_to(tmp))
    print((Path(tmp) / "out" / "eval" / "metrics.json").read_text())

    # a typo in the config is caught before any work happens
    bad = Path(tmp) / "bad.toml"
    bad.write_text("[train]\nlearnig_rate = 0.1\n")
    code, _, err = semid("train", "--config", str(bad))
    print("exit", code, err.strip().splitlines()[-1])
