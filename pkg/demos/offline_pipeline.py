"""
End-to-end run with a scripted backend
======================================

Writes a small Swissmetro-layout file, a scripted backend and a config, then
drives every CLI stage without network access.  Point ``--mock-script`` away
and set ``llm.provider`` in the config to use a real chat-completion API.
"""

import json
import sys
import tempfile
from pathlib import Path

import yaml

from symchoice.cli import main
from symchoice.synthetic import write_offline_script, write_swissmetro_like

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="symchoice_"))
data = write_swissmetro_like(work / "swissmetro.tsv", n_individuals=200, records=2)
script = write_offline_script(work / "mock.yaml", "swissmetro", ("Train", "Swissmetro", "Car"))

config = {
    "task": "swissmetro",
    "data": data.name,
    "output": "out",
    "seed": 0,
    "groups": {"dims": ["age"]},
    "discovery": {"k": 3, "max_iter": 3, "crossover": 1, "mutants": 1},
    "adaptation": {"iterations": 2},
    "fit": {"starts": 4},
    "baselines": {"prompt": ["zero-shot"]},
}
(work / "run.yaml").write_text(yaml.safe_dump(config))

code = main(["run-all", "--config", str(work / "run.yaml"), "--mock-script", str(script)])
print("exit code", code)

report = json.loads((work / "out" / "report.json").read_text())
for group, info in report["groups"].items():
    print(group, "loss %.2f" % info["nll"], info["utilities"]["Car"])
print("overall", report["metrics"]["overall"])
print("baselines", {k: round(v["accuracy"], 3) for k, v in report["baselines"].items()})
print("outputs in", work / "out")
