import csv
import json

import pytest

from trajabc.cli import main


def run(*argv):
    return main([str(a) for a in argv])


def relabel(src, dst, name="placeholder"):
    with open(src) as fh, open(dst, "w") as out:
        for line in fh:
            obj = json.loads(line)
            obj["actions"] = [name] * len(obj["actions"])
            out.write(json.dumps(obj) + "\n")


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A tiny trained run plus its dataset: (run_dir, data_dir, ini)."""
    from conftest import TINY_TEXT

    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run("--out", data, "gen-data", "--n-records", 40) == 0
    ini = root / "tiny.ini"
    ini.write_text(TINY_TEXT.replace("[data]\n", f"[data]\npath = {data / 'dataset.jsonl'}\n"
                                                 f"vocab = {data / 'vocab.txt'}\n"))
    assert run("--config", ini, "--out", root / "run", "train") == 0
    return root / "run", data, ini


def test_gen_data_deterministic(tmp_path, capsys):
    assert run("--out", tmp_path / "a", "gen-data", "--n-records", 100) == 0
    hist = capsys.readouterr().out
    assert run("--out", tmp_path / "b", "gen-data", "--n-records", 100) == 0
    a, b = (tmp_path / "a" / "dataset.jsonl").read_bytes(), (tmp_path / "b" / "dataset.jsonl").read_bytes()
    assert a == b and len(a.splitlines()) == 100
    assert (tmp_path / "a" / "vocab.txt").read_text().split() == ["standing", "walking", "running"]
    assert hist.splitlines()[-1].split() == ["total", "100"]


def test_print_config_roundtrip(tiny_ini, tmp_path, capsys):
    assert run("--config", tiny_ini, "--seed", 7, "--print-config") == 0
    text = capsys.readouterr().out
    (tmp_path / "again.ini").write_text(text)
    assert run("--config", tmp_path / "again.ini", "--print-config") == 0
    assert capsys.readouterr().out == text and "seed = 7" in text


def test_exit_codes(tmp_path, tiny_ini, trained):
    assert run("--config", tmp_path / "missing.ini", "--print-config") == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nd_h = -3\n")
    assert run("--config", bad, "--print-config") == 2
    assert run("eval", "--checkpoint", tmp_path / "nothing") == 3
    broken = tmp_path / "broken.jsonl"
    broken.write_text("{not json\n")
    run_dir, _, _ = trained
    assert run("eval", "--checkpoint", run_dir, "--data", broken) == 3


def test_checkpoint_config_mismatch(trained, tmp_path, capsys):
    run_dir, _, ini = trained
    other = tmp_path / "other.ini"
    other.write_text(ini.read_text().replace("d_h = 12", "d_h = 20").replace("k_bom = 2", "k_bom = 3"))
    assert run("--config", other, "eval", "--checkpoint", run_dir) == 2
    err = capsys.readouterr().err
    assert "d_h" in err and "k_bom" in err


def test_eval_outputs(trained, tmp_path):
    run_dir, _, ini = trained
    out = tmp_path / "ev"
    assert run("--config", ini, "--out", out, "eval", "--checkpoint", run_dir, "-L", 4, "--predictions") == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["L"] == 4 and metrics["mode"] == "best-of-L"
    rows = list(csv.DictReader(open(out / "predictions.csv")))
    kinds = {r["kind"] for r in rows}
    assert kinds == {"observed", "truth", "sample"}
    assert {r["sample"] for r in rows if r["kind"] == "sample"} == {"0", "1", "2", "3"}


def test_embed_rows(trained, tmp_path):
    run_dir, _, ini = trained
    out = tmp_path / "em"
    assert run("--config", ini, "--out", out, "embed", "--checkpoint", run_dir) == 0
    rows = list(csv.reader(open(out / "embeddings.csv")))
    assert rows[0][:3] == ["window_id", "action", "h0"] and len(rows[0]) == 2 + 12
    assert len(rows) > 1


def test_ablate_grid_size(tiny_ini, tmp_path):
    out = tmp_path / "grid"
    assert run("--config", tiny_ini, "--out", out, "ablate", "--betas", "0.25,0.5,0.75",
               "--regimes", "abc", "--seeds", "0,1") == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert len(rows) == 6 and all(r["status"] == "ok" for r in rows)
    assert {(r["beta"], r["seed"]) for r in rows} == {(b, s) for b in ("0.25", "0.5", "0.75") for s in "01"}
    assert (out / "ablation.txt").exists() and (out / "beta_sweep.csv").exists()
