"""Command-line workflow: save a problem file, check it, sweep it, merge the reports.

Each step runs the same entry point as the ``smpv`` console script.  Exit
codes are 0 for HOLDS, 2 for VIOLATED and 3 for INCONCLUSIVE.  The MIXED
candidate is an ad hoc linear feedback, not an optimum, so the maximum
principle check rejects it; the spike sweep on SING-DET passes.  The merged
report takes the worst verdict.
"""

import contextlib
import io
import json
import tempfile
from pathlib import Path

from smpv.cli import main
from smpv.scenarios import get_scenario, save_problem

work = Path(tempfile.mkdtemp(prefix="smpv-demo-"))
sc = get_scenario("MIXED")
save_problem(work / "mixed.json", sc.spec, sc.control)


def step(*args):
    print("$ smpv", " ".join(map(str, args)))
    with contextlib.redirect_stdout(io.StringIO()):
        code = main([str(a) for a in args])
    print("  exit code", code)
    return code


step("validate", "--problem", work / "mixed.json", "--seed", 5)
step("check", "--problem", work / "mixed.json", "--seed", 5, "--steps", 128, "--paths", 4000,
     "--conditions", "maximum_principle,classical_singular", "--out", work / "check")
step("sweep", "--scenario", "SING-DET", "--kind", "epsilon", "--seed", 5, "--steps", 512, "--paths", 100,
     "--out", work / "sweep")
step("report", work / "check" / "summary.json", work / "sweep" / "summary.json", "--out", work / "merged")
merged = json.loads((work / "merged" / "summary.json").read_text())
for r in merged["reports"]:
    print(f"  {r['condition']}: {r['verdict']}")
print("merged verdict:", merged["verdict"])
print("outputs in", work)
