import hashlib
from pathlib import Path

import pytest

from racl import verify as V
from racl.cli import STEPS_SWEEP, main
from racl.dataio import HISTORY_COLUMNS, RESULT_COLUMNS, load_config, load_genotype, read_csv
from racl.search import SearchConfig

FIXTURES = Path(__file__).parent / "fixtures" / "report"
TINY = """\
epochs = 2
batch_size = 64
n_cells = 2
n_nodes = 4
width = 8
reduction_cells = [1]
data_dim = 8
n_classes = 4
n_train = 256
n_test = 128
calibration_epochs = 1
retrain_epochs = 2
retrain_batch_size = 64
"""


def _digest(root: Path) -> dict:
    return {p.relative_to(root): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.toml").write_text(TINY)
    assert main(["search", "--config", str(root / "tiny.toml"), "--seed", "1", "--out", str(root / "search")]) == 0
    assert main(["retrain", "--genotype", str(root / "search" / "genotype.json"),
                 "--config", str(root / "search" / "config.toml"), "--out", str(root / "model")]) == 0
    return root


# -- report golden files ------------------------------------------------------------

def test_report_reproduces_golden_csvs(tmp_path):
    runs = FIXTURES / "runs"
    before = _digest(FIXTURES)
    code = main(["report", "--history", str(runs / "constrained"), str(runs / "unconstrained" / "history.csv"),
                 "--results", str(runs / "constrained" / "results.csv"), str(runs / "unconstrained" / "results.csv"),
                 "--out", str(tmp_path)])
    assert code == 0
    for name in ("ablation.csv", "eps_sweep.csv", "steps_sweep.csv"):
        assert (tmp_path / name).read_bytes() == (FIXTURES / "expected" / name).read_bytes(), name
    assert _digest(FIXTURES) == before


def test_report_tables_have_the_sweep_protocol():
    eps = read_csv(FIXTURES / "expected" / "eps_sweep.csv")
    assert sorted({r["epsilon"] for r in eps}) == [0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07]
    steps = read_csv(FIXTURES / "expected" / "steps_sweep.csv")
    assert sorted({r["steps"] for r in steps}) == sorted({10, *STEPS_SWEEP})
    ablation = read_csv(FIXTURES / "expected" / "ablation.csv")
    assert [r["constrained"] for r in ablation] == ["True", "False"]
    assert ablation[1]["rho"] == 0.0 and ablation[1]["final_theta"] == 0.0


def test_report_without_inputs_fails(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path)]) == 2
    assert "needs --history" in capsys.readouterr().err


# -- search / retrain / attack ---------------------------------------------------------

def test_search_outputs(pipeline):
    out = pipeline / "search"
    for name in ("genotype.json", "history.csv", "checkpoint.npz", "config.toml"):
        assert (out / name).exists(), name
    cfg = load_config(out / "config.toml", SearchConfig)
    assert cfg.seed == 1 and cfg.lambda_star > 0 and cfg.n_cells == 2
    assert len(read_csv(out / "history.csv", HISTORY_COLUMNS)) == 2
    assert load_genotype(out / "genotype.json").meta["seed"] == 1


def test_search_is_repeatable_from_recorded_config(pipeline, tmp_path):
    out = pipeline / "search"
    assert main(["search", "--config", str(out / "config.toml"), "--out", str(tmp_path)]) == 0
    for name in ("genotype.json", "history.csv"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_search_resume_flag(pipeline, tmp_path):
    src = pipeline / "search"
    cfg = (src / "config.toml").read_text().replace("epochs = 2", "epochs = 3")
    (tmp_path / "c.toml").write_text(cfg)
    full = tmp_path / "full"
    assert main(["search", "--config", str(tmp_path / "c.toml"), "--out", str(full)]) == 0
    # the two-epoch checkpoint carries epochs = 2, so resuming it adds nothing
    again = tmp_path / "again"
    assert main(["search", "--config", str(tmp_path / "c.toml"), "--resume", str(src / "checkpoint.npz"),
                 "--out", str(again)]) == 0
    assert (again / "history.csv").read_bytes() == (src / "history.csv").read_bytes()
    assert read_csv(full / "history.csv")[:2] == read_csv(src / "history.csv")


def test_retrain_outputs(pipeline):
    rows = read_csv(pipeline / "model" / "curve.csv")
    assert [r["epoch"] for r in rows] == [1, 2]
    assert (pipeline / "model" / "model.npz").exists()


def test_attack_zero_eps_matches_clean(pipeline, tmp_path):
    code = main(["attack", "--model", str(pipeline / "model" / "model.npz"), "--attack", "fgsm",
                 "--eps", "0", "--out", str(tmp_path)])
    assert code == 0
    rows = read_csv(tmp_path / "results.csv", RESULT_COLUMNS)
    assert rows[0]["adv_acc"] == rows[0]["clean_acc"]
    assert [r["epsilon"] for r in rows[1:]] == [0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07]
    assert (tmp_path / "config.toml").exists()


def test_attack_pgd_sweeps_steps(pipeline, tmp_path):
    code = main(["attack", "--model", str(pipeline / "model" / "model.npz"), "--attack", "pgd",
                 "--eps", "0.03", "--steps", "3", "--step-size", "0.01", "--out", str(tmp_path)])
    assert code == 0
    rows = read_csv(tmp_path / "results.csv", RESULT_COLUMNS)
    assert [r["steps"] for r in rows[-len(STEPS_SWEEP):]] == list(STEPS_SWEEP)
    assert all(r["adv_acc"] <= r["clean_acc"] for r in rows)


def test_attack_transfer(pipeline, tmp_path):
    model = str(pipeline / "model" / "model.npz")
    code = main(["attack", "--model", model, "--source-model", model, "--attack", "mim", "--eps", "0.05",
                 "--steps", "3", "--step-size", "0.02", "--out", str(tmp_path)])
    assert code == 0
    (row,) = read_csv(tmp_path / "results.csv", RESULT_COLUMNS)
    assert row["attack"] == "transfer-mim"


def test_commands_do_not_touch_inputs(pipeline, tmp_path):
    before = _digest(pipeline / "model")
    main(["attack", "--model", str(pipeline / "model" / "model.npz"), "--attack", "fgsm",
          "--eps", "0.02", "--out", str(tmp_path / "x")])
    assert _digest(pipeline / "model") == before


@pytest.mark.parametrize("argv, what", [
    (["retrain", "--genotype", "nope.json", "--out", "{tmp}"], "genotype not found: nope.json"),
    (["search", "--config", "missing.toml", "--out", "{tmp}"], "config file not found: missing.toml"),
    (["attack", "--model", "gone.npz", "--out", "{tmp}"], "model not found: gone.npz"),
    (["report", "--history", "nowhere", "--out", "{tmp}"], "history not found: nowhere"),
])
def test_missing_files_name_the_path(tmp_path, capsys, argv, what):
    assert main([a.format(tmp=tmp_path) for a in argv]) == 2
    assert what in capsys.readouterr().err


def test_unknown_config_key_warns(tmp_path):
    (tmp_path / "c.toml").write_text(TINY.replace("epochs = 2", "epochs = 0") + "lambda_star = 10.0\nshiny = 1\n")
    with pytest.warns(UserWarning, match="shiny"):
        assert main(["search", "--config", str(tmp_path / "c.toml"), "--out", str(tmp_path / "o")]) == 0


# -- verify / gradcheck -------------------------------------------------------------

def test_verify_product_passes(tmp_path, capsys):
    assert main(["verify", "--suite", "product", "--n", "20000", "--out", str(tmp_path)]) == 0
    assert "all 20 checks within tolerance" in capsys.readouterr().out
    rows = read_csv(tmp_path / "verify_product.csv")
    assert len(rows) == 20 and all(r["ok"] == "True" for r in rows)


def test_verify_failure_exits_nonzero(monkeypatch, capsys):
    bad = lambda n=0, seed=0: [V.Case("fake", "always", "x", 2.0, 1.0), V.Case("fake", "fine", "x", 0.0, 1.0)]
    monkeypatch.setitem(V.SUITES, "product", bad)
    assert main(["verify", "--suite", "product"]) == 1
    out = capsys.readouterr().out
    assert "1 of 2 checks outside tolerance" in out and "FAIL" in out


def test_gradcheck_diffgraph_passes(capsys):
    assert main(["gradcheck", "--target", "diffgraph"]) == 0
    assert "checks within tolerance" in capsys.readouterr().out


def test_unknown_suite_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["verify", "--suite", "bogus"])
    assert exc.value.code == 2
