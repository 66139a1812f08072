import json
from pathlib import Path

import pytest

from toporag.cli import main

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def trained_model(tmp_path_factory):
    """A tiny trained model + index over the fixture references."""
    root = tmp_path_factory.mktemp("cli_model")
    corpus = root / "corpus"
    corpus.mkdir()
    import numpy as np

    import sys
    sys.path.insert(0, str(Path(__file__).parent))
    from synthdata import family_doc

    rng = np.random.default_rng(0)
    ids = []
    for fam in ("ring", "star", "chain"):
        for k in range(4):
            doc = family_doc(fam, 4 + k, f"{fam}{k}", rng, attr_max=0)
            raw = {
                "case_id": doc.case_id,
                "routers": doc.routers,
                "switches": doc.switches,
                "links": [{"a": l.a, "a_if": l.a_if, "b": l.b, "b_if": l.b_if} for l in doc.links],
            }
            (corpus / f"{doc.case_id}.json").write_text(json.dumps(raw))
            ids.append(doc.case_id)
    manifest_path = root / "splits.json"
    model_path = root / "model.json"
    code = main(
        ["split", "--corpus", str(corpus), "--val", "2", "--test", "2", "--seed", "3",
         "--out", str(manifest_path)]
    )
    assert code == 0
    config = root / "cfg.toml"
    config.write_text("[trainer]\nbatch_size = 4\nmax_epochs = 3\npatience = 3\n")
    code = main(
        ["train", "--corpus", str(corpus), "--manifest", str(manifest_path),
         "--model", str(model_path), "--config", str(config), "--seed", "3"]
    )
    assert code == 0
    return root, model_path


class TestParse:
    def test_two_router_summary(self, capsys):
        code, out, _ = run_cli(capsys, "parse", str(FIXTURES / "two_router.json"))
        assert code == 0
        assert out.splitlines()[0] == "nodes=2 edges=1 max_degree=1"

    def test_missing_file_is_user_error(self, capsys):
        code, _, err = run_cli(capsys, "parse", "no_such_file.json")
        assert code == 1
        assert "error" in err

    def test_bad_json_is_user_error(self, capsys, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        code, _, err = run_cli(capsys, "parse", str(bad))
        assert code == 1

    def test_unknown_flag_is_hard_error(self, capsys):
        code, _, err = run_cli(capsys, "parse", "--zap", str(FIXTURES / "two_router.json"))
        assert code == 1


class TestSplit:
    def test_writes_byte_stable_manifest(self, capsys, tmp_path):
        corpus = FIXTURES / "queries"
        out1 = tmp_path / "m1.json"
        out2 = tmp_path / "m2.json"
        for out in (out1, out2):
            code, _, _ = run_cli(
                capsys, "split", "--corpus", str(corpus), "--val", "1", "--test", "2",
                "--query", "1", "--seed", "5", "--out", str(out)
            )
            assert code == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_infeasible_is_user_error(self, capsys, tmp_path):
        code, _, err = run_cli(
            capsys, "split", "--corpus", str(FIXTURES / "queries"), "--val", "10", "--test", "10",
            "--out", str(tmp_path / "m.json")
        )
        assert code == 1


class TestTrainEmbed:
    def test_trained_model_loads_and_embeds(self, capsys, trained_model):
        _, model_path = trained_model
        code, out, _ = run_cli(
            capsys, "embed", str(FIXTURES / "two_router.json"), "--model", str(model_path)
        )
        assert code == 0
        payload = json.loads(out)
        assert payload["case_id"] == "two_router"
        assert len(payload["embedding"]) == 32

    def test_train_log_written(self, trained_model):
        root, model_path = trained_model
        log = model_path.with_suffix(".log.jsonl")
        rows = [json.loads(line) for line in log.read_text().splitlines()]
        assert rows and set(rows[0]) == {"epoch", "train_loss", "val_loss"}


class TestRetrieve:
    def test_self_retrieval_rank_one(self, capsys, trained_model, tmp_path):
        _, model_path = trained_model
        index_path = tmp_path / "refs.index.json"
        code, out, _ = run_cli(
            capsys, "retrieve", str(FIXTURES / "refs" / "ref_pair" / "topology.json"),
            "--model", str(model_path), "--refs", str(FIXTURES / "refs"),
            "--index", str(index_path), "--k", "3",
        )
        assert code == 0
        lines = out.strip().splitlines()
        top_id, top_sim = lines[0].split("\t")
        assert top_id == "ref_pair"
        assert float(top_sim) >= 1 - 1e-6
        assert index_path.is_file()

    def test_reuses_existing_index(self, capsys, trained_model, tmp_path):
        _, model_path = trained_model
        index_path = tmp_path / "refs.index.json"
        run_cli(
            capsys, "retrieve", str(FIXTURES / "two_router.json"), "--model", str(model_path),
            "--refs", str(FIXTURES / "refs"), "--index", str(index_path),
        )
        code, out, _ = run_cli(
            capsys, "retrieve", str(FIXTURES / "two_router.json"), "--model", str(model_path),
            "--index", str(index_path), "--k", "1",
        )
        assert code == 0 and out.strip()


class TestRunAndEval:
    def test_run_single_case(self, capsys, trained_model, tmp_path):
        _, model_path = trained_model
        code, out, _ = run_cli(
            capsys, "run", "--case", str(FIXTURES / "two_router.json"),
            "--model", str(model_path), "--refs", str(FIXTURES / "refs"),
            "--index", str(tmp_path / "idx.json"), "--out", str(tmp_path / "cases"),
            "--seed", "1",
        )
        assert code == 0
        assert "PASSED" in out
        assert (tmp_path / "cases" / "two_router" / "state.json").is_file()

    def test_eval_mock_fault_rate_zero(self, capsys, trained_model, tmp_path):
        _, model_path = trained_model
        code, out, _ = run_cli(
            capsys, "eval", "--queries", str(FIXTURES / "queries"),
            "--model", str(model_path), "--refs", str(FIXTURES / "refs"),
            "--index", str(tmp_path / "idx.json"), "--out", str(tmp_path / "out"),
            "--backend", "mock", "--fault-rate", "0", "--seed", "1",
        )
        assert code == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["pass_at"]["1"] == 1.0

    def test_eval_no_toporag_mode(self, capsys, tmp_path):
        code, out, _ = run_cli(
            capsys, "eval", "--queries", str(FIXTURES / "queries"), "--no-toporag",
            "--out", str(tmp_path / "out"), "--seed", "1",
        )
        assert code == 0
        assert (tmp_path / "out" / "report.json").is_file()

    def test_missing_queries_user_error(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "eval", "--queries", str(tmp_path / "none"), "--no-toporag")
        assert code == 1


class TestHelp:
    def test_help_zero_exit(self, capsys):
        code, out, _ = run_cli(capsys, "--help")
        assert code == 0
        for command in ("parse", "split", "train", "embed", "retrieve", "run", "eval"):
            assert command in out

    def test_subcommand_help_lists_flags(self, capsys):
        code, out, _ = run_cli(capsys, "eval", "--help")
        assert code == 0
        for flag in ("--config", "--seed", "--out", "--queries", "--backend", "--no-toporag"):
            assert flag in out
