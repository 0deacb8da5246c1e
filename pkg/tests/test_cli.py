"""End-to-end command behavior and the exit-code contract."""

import hashlib
import json

import pytest

from knowcol.cli import main
from knowcol.dataio import load_triples_tsv, synth_fixture


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_fixture")
    paths = synth_fixture(8, 8, seed=11, out_dir=out)
    # shrink the run for test speed
    cfg = json.loads(paths.config.read_text())
    cfg.update({"epochs": 4, "d_e": 8})
    paths.config.write_text(json.dumps(cfg, indent=2, sort_keys=True))
    return paths


class TestExtractSubgraph:
    def _write_inputs(self, tmp_path):
        triples = tmp_path / "triples.tsv"
        triples.write_text("Q1\tP31\tQ2\nQ2\tP279\tQ3\nQ1\tP99\tQ4\nQ4\tP99\tQ5\n")
        seeds = tmp_path / "seeds.txt"
        seeds.write_text("Q1\nQ4\n")
        return triples, seeds

    def test_stats_match_brute_force(self, tmp_path, capsys):
        triples, seeds = self._write_inputs(tmp_path)
        out = tmp_path / "sub.tsv"
        rc = main(["extract-subgraph", "--triples", str(triples),
                   "--seeds", str(seeds), "--hierarchy", "P31,P279", "--out", str(out)])
        assert rc == 0
        # seeds {Q1,Q4} one-hop over {P31,P279}: adds Q2; induced on
        # {Q1,Q2,Q4} keeps (Q1,P31,Q2) and (Q1,P99,Q4)
        assert capsys.readouterr().out.strip() == "entities=3 relations=2 triples=2"
        assert load_triples_tsv(out) == [("Q1", "P31", "Q2"), ("Q1", "P99", "Q4")]

    def test_default_hierarchy(self, tmp_path, capsys):
        triples, seeds = self._write_inputs(tmp_path)
        out = tmp_path / "sub.tsv"
        rc = main(["extract-subgraph", "--triples", str(triples),
                   "--seeds", str(seeds), "--out", str(out)])
        assert rc == 0  # P31,P279,P171 default; P171 absent is fine

    def test_output_canonically_sorted(self, tmp_path, capsys):
        triples = tmp_path / "t.tsv"
        triples.write_text("Q9\tP31\tQ1\nQ2\tP31\tQ1\nQ2\tP17\tQ9\n")
        seeds = tmp_path / "s.txt"
        seeds.write_text("Q9\nQ2\nQ1\n")
        out = tmp_path / "sub.tsv"
        assert main(["extract-subgraph", "--triples", str(triples),
                     "--seeds", str(seeds), "--out", str(out)]) == 0
        assert load_triples_tsv(out) == sorted(load_triples_tsv(out))

    def test_missing_triples_file_exit_1(self, tmp_path, capsys):
        seeds = tmp_path / "s.txt"
        seeds.write_text("Q1\n")
        rc = main(["extract-subgraph", "--triples", str(tmp_path / "absent.tsv"),
                   "--seeds", str(seeds), "--out", str(tmp_path / "o.tsv")])
        assert rc == 1
        assert "absent.tsv" in capsys.readouterr().err

    def test_unknown_seed_exit_1(self, tmp_path, capsys):
        triples, seeds = self._write_inputs(tmp_path)
        seeds.write_text("Q999\n")
        rc = main(["extract-subgraph", "--triples", str(triples),
                   "--seeds", str(seeds), "--out", str(tmp_path / "o.tsv")])
        assert rc == 1
        assert "Q999" in capsys.readouterr().err

    def test_bad_flag_exit_2(self, capsys):
        assert main(["extract-subgraph", "--nope"]) == 2


class TestTrainCommand:
    def test_train_writes_artifacts(self, fixture_dir, tmp_path, capsys):
        out_dir = tmp_path / "run"
        rc = main(["train", "--config", str(fixture_dir.config),
                   "--out-dir", str(out_dir)])
        assert rc == 0
        assert (out_dir / "checkpoint.kcck").is_file()
        lines = (out_dir / "loss_log.jsonl").read_text().splitlines()
        assert len(lines) == 4
        json.loads(lines[0])

    def test_invalid_tau_exit_2_before_compute(self, fixture_dir, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        cfg = json.loads(fixture_dir.config.read_text())
        cfg["tau"] = 0.0
        cfg["paths"]["triples"] = str(tmp_path / "missing.tsv")  # never reached
        bad.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(bad)]) == 2
        assert "tau" in capsys.readouterr().err

    def test_unknown_config_key_exit_2(self, fixture_dir, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        cfg = json.loads(fixture_dir.config.read_text())
        cfg["learning_rate"] = 0.1
        bad.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(bad)]) == 2

    def test_identical_runs_identical_checkpoints(self, fixture_dir, tmp_path, capsys):
        hashes = []
        for name in ("r1", "r2"):
            out_dir = tmp_path / name
            assert main(["train", "--config", str(fixture_dir.config),
                         "--out-dir", str(out_dir)]) == 0
            hashes.append(_sha(out_dir / "checkpoint.kcck"))
        assert hashes[0] == hashes[1]


class TestGradcheckCommand:
    def test_passes_on_fixture_config(self, fixture_dir, capsys):
        rc = main(["gradcheck", "--config", str(fixture_dir.config)])
        out = capsys.readouterr().out
        assert rc == 0
        assert "max relative error" in out

    def test_corrupted_gradients_fail(self, fixture_dir, capsys):
        rc = main(["gradcheck", "--config", str(fixture_dir.config),
                   "--corrupt-gradients"])
        assert rc == 1

    def test_bad_fd_step_exit_2(self, fixture_dir, capsys):
        rc = main(["gradcheck", "--config", str(fixture_dir.config),
                   "--fd-step", "0"])
        assert rc == 2


@pytest.fixture(scope="module")
def trained(fixture_dir, tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("trained")
    assert main(["train", "--config", str(fixture_dir.config),
                 "--out-dir", str(out_dir)]) == 0
    return out_dir / "checkpoint.kcck"


class TestInferEvalCommands:
    def _common(self, fixture_dir, trained):
        return ["--checkpoint", str(trained),
                "--catalog", str(fixture_dir.catalog),
                "--image-store", str(fixture_dir.image_store),
                "--text-store", str(fixture_dir.text_store)]

    def test_infer_default_k_is_5(self, fixture_dir, trained, tmp_path, capsys):
        out = tmp_path / "preds.jsonl"
        rc = main(["infer", *self._common(fixture_dir, trained),
                   "--queries", str(fixture_dir.test_dataset), "--out", str(out)])
        assert rc == 0
        first = json.loads(out.read_text().splitlines()[0])
        assert first["query_index"] == 0
        assert len(first["topk"]) == 5
        assert set(first["topk"][0]) == {"qid", "score"}

    def test_eval_reports_hm(self, fixture_dir, trained, tmp_path, capsys):
        report_path = tmp_path / "report.json"
        rc = main(["eval", *self._common(fixture_dir, trained),
                   "--testset", str(fixture_dir.test_dataset),
                   "--report", str(report_path)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "harmonic mean" in out
        report = json.loads(report_path.read_text())
        assert {"acc_seen", "acc_unseen", "harmonic_mean"} <= set(report)

    def test_bad_k_exit_2(self, fixture_dir, trained, capsys):
        rc = main(["infer", *self._common(fixture_dir, trained),
                   "--queries", str(fixture_dir.test_dataset), "--k", "0"])
        assert rc == 2


class TestSynthCommand:
    def test_synth_writes_fixture(self, tmp_path, capsys):
        rc = main(["synth", "--entities", "10", "--dim", "8", "--seed", "3",
                   "--out", str(tmp_path / "fx")])
        assert rc == 0
        assert (tmp_path / "fx" / "catalog.jsonl").is_file()
        catalog_lines = (tmp_path / "fx" / "catalog.jsonl").read_text().splitlines()
        assert len(catalog_lines) == 10
        unseen = sum(1 for l in catalog_lines if json.loads(l)["split"] == "unseen")
        assert unseen == 2

    def test_too_few_entities_exit_2(self, tmp_path, capsys):
        rc = main(["synth", "--entities", "3", "--dim", "8",
                   "--out", str(tmp_path / "fx")])
        assert rc == 2


class TestHelpAndUsage:
    @pytest.mark.parametrize("command", ["extract-subgraph", "train", "gradcheck",
                                         "infer", "eval", "synth"])
    def test_help_exits_zero(self, command, capsys):
        assert main([command, "--help"]) == 0
        out = capsys.readouterr().out
        assert "--" in out

    def test_no_command_exit_2(self, capsys):
        assert main([]) == 2

    def test_unknown_command_exit_2(self, capsys):
        assert main(["frobnicate"]) == 2
