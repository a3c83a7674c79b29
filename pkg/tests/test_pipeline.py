"""End-to-end runs of the stage graph on a tiny configuration."""
import csv
import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from donna.cli import main
from donna.pipeline import PIPELINE_ORDER, Context, explore_variants, ledger_rows, load_config, read_manifest

TINY_SPACE = """\
name: tiny
preset: desk-ref-3
grid:
  kernel: [3, 5]
  expand: [2]
  depth: [1, 2]
  attention: [none, se]
  layer_type: [depthwise]
  channel_scale: [1.0]
constraints:
  k5: {kernel: [5]}
  no-se: {attention: [none]}
"""

TINY = """\
data: {train: 256, heldout: 128}
space: tiny_space.yaml
reference: {epochs: 1}
sample: {pool: 64, targets: 6, test: 4}
finetune: {epochs: 1}
search: {population: 16, generations: 10, costs: [{kind: analytic-macs, name: macs}, {kind: analytic-params, name: params}]}
compare: {budget: 20, population: 10, band: 0.2, seeds: 2}
optima: {count: 2}
variants: [k5, no-se]
"""


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    (root / "tiny_space.yaml").write_text(TINY_SPACE)
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY)
    for run in ("a", "b"):
        assert main(["all", "--config", str(cfg), "--out", str(root / run), "--seed", "1", "-q"]) == 0
    return root, cfg


def _csvs(out: Path) -> dict[str, bytes]:
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*.csv"))}


def test_every_stage_has_a_manifest(tiny):
    root, _ = tiny
    for stage in PIPELINE_ORDER:
        assert (root / "a" / "manifests" / f"{stage}.json").exists()


def test_two_runs_are_byte_identical(tiny):
    root, _ = tiny
    a, b = _csvs(root / "a"), _csvs(root / "b")
    assert a.keys() == b.keys() and len(a) > 15
    assert a == b


def test_rerun_skips_every_stage(tiny, caplog):
    root, cfg = tiny
    before = _csvs(root / "a")
    caplog.set_level("INFO", logger="donna")
    assert main(["all", "--config", str(cfg), "--out", str(root / "a"), "--seed", "1"]) == 0
    assert sum("up to date" in r.message for r in caplog.records) == len(PIPELINE_ORDER)
    assert _csvs(root / "a") == before


def test_damaged_output_triggers_rerun(tiny, tmp_path):
    root, cfg = tiny
    out = tmp_path / "copy"
    shutil.copytree(root / "a", out)
    target = out / "predictor" / "metrics.csv"
    good = target.read_bytes()
    target.write_text("garbage\n")
    assert main(["eval-predictor", "--config", str(cfg), "--out", str(out), "--seed", "1", "-q"]) == 0
    assert target.read_bytes() == good


def test_config_change_reruns_only_downstream(tiny, tmp_path):
    root, cfg = tiny
    out = tmp_path / "copy"
    shutil.copytree(root / "a", out)
    keys = {s: read_manifest(Context(load_config(cfg), out), s)["key"] for s in PIPELINE_ORDER}
    changed = tmp_path / "tiny.yaml"
    changed.write_text(TINY.replace("optima: {count: 2}", "optima: {count: 1}"))
    shutil.copy(root / "tiny_space.yaml", tmp_path / "tiny_space.yaml")
    assert main(["all", "--config", str(changed), "--out", str(out), "--seed", "1", "-q"]) == 0
    ctx = Context(load_config(changed), out)
    after = {s: read_manifest(ctx, s)["key"] for s in PIPELINE_ORDER}
    assert [s for s in PIPELINE_ORDER if after[s] != keys[s]] == ["finetune-optima", "report"]


def test_missing_upstream_exit_code(tmp_path, capsys):
    assert main(["fit-predictor", "--out", str(tmp_path / "empty"), "-q"]) == 2
    assert "finetune-lib" in capsys.readouterr().err


def test_report_contents(tiny):
    out = tiny[0] / "a" / "report"
    with open(out / "cost_ledger.csv") as f:
        rows = list(csv.DictReader(f))
    totals = {r["plan"]: float(r["epochs"]) for r in rows if r["term"] == "total"}
    assert totals["paper-search"] == 3870 and totals["paper-compression"] == 1585
    assert [float(r["epochs"]) for r in rows if r["plan"] == "paper-random-ratio"] == [900.0]
    # one reference epoch, every block distilled once, (6 + 4 + 2) one-epoch finetunes
    assert totals["this-run"] == 1 + 3 * 8 + 12
    with open(out / "random_vs_nsga.csv") as f:
        methods = [r["method"] for r in csv.DictReader(f)]
    assert methods == ["random", "nsga2"] * 2


def test_explore_trains_nothing(tiny, tmp_path):
    root, cfg = tiny
    out = tmp_path / "copy"
    shutil.copytree(root / "a", out)
    ctx = Context(load_config(cfg), out, seed=1)
    before = ledger_rows(ctx)
    blocks_before = sorted(p.name for p in (out / "blocks").rglob("meta.json"))
    rows = explore_variants(ctx, [{"name": "k5-no-se", "constraints": {"kernel": [5], "attention": ["none"]}}])
    assert rows[0]["cardinality"] == 2**3 and rows[0]["front_size"] >= 1
    assert ledger_rows(ctx) == before
    assert sorted(p.name for p in (out / "blocks").rglob("meta.json")) == blocks_before
    assert read_manifest(ctx, "explore")["counters"] == {}


def test_cost_ledger_subcommand(tiny, capsys):
    root, cfg = tiny
    assert main(["cost-ledger", "--config", str(cfg), "--out", str(root / "a"), "-q"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("plan,term,count,epochs_each,epochs")
    assert "3870" in text and "1585" in text and "900" in text


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "donna.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("gen-data", "train-ref", "bkd", "sample", "finetune-lib", "fit-predictor", "eval-predictor",
                "search", "finetune-optima", "explore", "report", "cost-ledger"):
        assert cmd in proc.stdout


def test_manifest_records_output_hashes(tiny):
    m = json.loads((tiny[0] / "a" / "manifests" / "search.json").read_text())
    assert "search/pareto_macs.csv" in m["outputs"] and len(m["key"]) == 64


def test_concurrent_run_is_refused(tmp_path, capsys):
    import fcntl

    out = tmp_path / "busy"
    out.mkdir()
    with open(out / ".donna.lock", "w") as held:
        fcntl.flock(held, fcntl.LOCK_EX)
        assert main(["gen-data", "--out", str(out), "-q"]) == 3
    assert "another donna process" in capsys.readouterr().err
    assert main(["gen-data", "--out", str(out), "-q"]) == 0


def test_resumed_stage_keeps_the_ledger(tiny, tmp_path):
    root, cfg = tiny
    out = tmp_path / "copy"
    shutil.copytree(root / "a", out)
    ledger = (out / "report" / "cost_ledger.csv").read_bytes()
    # reruns reuse the stored finetune records; the ledger must still count them
    for stage in ("bkd", "finetune-lib", "finetune-optima"):
        assert main([stage, "--force", "--config", str(cfg), "--out", str(out), "--seed", "1", "-q"]) == 0
    assert main(["report", "--force", "--config", str(cfg), "--out", str(out), "--seed", "1", "-q"]) == 0
    assert (out / "report" / "cost_ledger.csv").read_bytes() == ledger
