"""Drive the command-line interface end to end in a temporary directory.

simulate writes data and a matching model config, fit writes the model and a
report, predict re-evaluates the fitted moments, and verify runs a self-check.
Every command writes a manifest whose digest ignores wall-clock timings.
"""
import json
import tempfile
from pathlib import Path

from gamcov.cli import run

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    run(["-q", "simulate", "--scenario", "smooth", "--d", "2", "--n", "400", "--seed", "3", "--out", str(tmp / "sim")])
    code = run(["-q", "fit", str(tmp / "sim" / "config.json"), str(tmp / "sim" / "data.csv"), str(tmp / "fit"),
                "--method", "efs"])
    report = json.loads((tmp / "fit" / "report.json").read_text())
    print(f"fit exit code {code}: LAML {report['laml']:.4f}, lambda {[round(x, 3) for x in report['lambda']]}")
    run(["-q", "predict", str(tmp / "fit" / "model.json"), str(tmp / "sim" / "data.csv"), str(tmp / "pred.csv")])
    same = (tmp / "pred.csv").read_bytes() == (tmp / "fit" / "fitted.csv").read_bytes()
    print("predict reproduces fitted.csv byte for byte:", same)
    print((tmp / "pred.csv").read_text().splitlines()[0])
    print("manifest digest", json.loads((tmp / "fit" / "manifest.json").read_text())["digest"][:16], "...")
    print("\nverify sparsity:")
    run(["-q", "verify", "sparsity", "--d", "4"])
