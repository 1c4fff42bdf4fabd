"""Command-line surface: exit codes, byte-reproducible outputs, config-file
validation, and the file formats each command writes."""

import json

import pytest

from journeykit.cli import main
from journeykit.model import load_checkpoint
from journeykit.numerics import Vector
from journeykit.repository import Repository, persist
from journeykit.schema import ingest_jsonl


def run(capsys, *argv):
    code = main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Shared workspace: a small corpus, a model config, and a trained
    checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    gen_cfg = root / "gen.json"
    gen_cfg.write_text(json.dumps({"entities": 6, "relations": 3,
                                   "sentences": 3,
                                   "heldout_fraction": 0.5}))
    corpus = root / "corpus.jsonl"
    assert main(["gen-data", "--out", str(corpus), "--seed", "1",
                 "--config", str(gen_cfg)]) == 0

    train_cfg = root / "train.json"
    train_cfg.write_text(json.dumps({
        "d_model": 8, "head_count": 2, "ffn_mult": 1,
        "layer_groups": [{"stream": "structured",
                          "level": "instance_local", "layers": 1}],
        "lr": 0.01, "weights": {"mlm": 1.0, "lp": 1.0, "rc": 1.0,
                                "align": 0.0}}))
    ckpt = root / "model.ckpt"
    assert main(["train", "--corpus", str(corpus), "--config",
                 str(train_cfg), "--out", str(ckpt), "--seed", "0",
                 "--steps", "3"]) == 0
    ckpt_cfg = root / "ckpt.json"
    ckpt_cfg.write_text(json.dumps({"checkpoint": str(ckpt)}))
    return {"root": root, "corpus": corpus, "gen_cfg": gen_cfg,
            "train_cfg": train_cfg, "ckpt": ckpt, "ckpt_cfg": ckpt_cfg}


class TestParser:
    def test_missing_command_is_usage_error(self, capsys):
        code, _, _ = run(capsys, )
        assert code == 2

    def test_unknown_command_is_usage_error(self, capsys):
        code, _, _ = run(capsys, "frobnicate")
        assert code == 2

    def test_missing_required_flag_is_usage_error(self, capsys):
        code, _, _ = run(capsys, "validate")
        assert code == 2

    def test_help_exits_zero(self, capsys):
        code, out, _ = run(capsys, "--help")
        assert code == 0
        assert "gen-data" in out and "inspect-attention" in out


class TestGenData:
    def test_writes_loadable_corpus(self, ws, capsys, tmp_path):
        out = tmp_path / "c.jsonl"
        code, text, _ = run(capsys, "gen-data", "--out", str(out),
                            "--seed", "2")
        assert code == 0
        assert "records" in text and "instances" in text
        corpus = ingest_jsonl(out)
        assert corpus.instances

    def test_same_seed_same_bytes(self, ws, capsys, tmp_path):
        outs = []
        for name in ("a.jsonl", "b.jsonl"):
            p = tmp_path / name
            assert run(capsys, "gen-data", "--out", str(p), "--seed", "7",
                       "--config", str(ws["gen_cfg"]))[0] == 0
            outs.append(p.read_bytes())
        assert outs[0] == outs[1]

    def test_seed_changes_bytes(self, ws, capsys, tmp_path):
        outs = []
        for seed in ("7", "8"):
            p = tmp_path / f"s{seed}.jsonl"
            assert run(capsys, "gen-data", "--out", str(p), "--seed", seed,
                       "--config", str(ws["gen_cfg"]))[0] == 0
            outs.append(p.read_bytes())
        assert outs[0] != outs[1]

    def test_config_controls_size(self, capsys, tmp_path):
        cfg = tmp_path / "g.json"
        cfg.write_text(json.dumps({"entities": 4, "relations": 1,
                                   "sentences": 0,
                                   "heldout_fraction": 0.0}))
        out = tmp_path / "c.jsonl"
        assert run(capsys, "gen-data", "--out", str(out), "--seed", "0",
                   "--config", str(cfg))[0] == 0
        corpus = ingest_jsonl(out)
        assert len(corpus.entities) == 4
        assert len(corpus.instances) == 4

    def test_unknown_config_key_fails(self, capsys, tmp_path):
        cfg = tmp_path / "g.json"
        cfg.write_text(json.dumps({"entites": 4}))
        code, _, err = run(capsys, "gen-data", "--out",
                           str(tmp_path / "c.jsonl"), "--config", str(cfg))
        assert code == 1
        assert "unknown config keys" in err and "entites" in err

    def test_invalid_json_fails(self, capsys, tmp_path):
        cfg = tmp_path / "g.json"
        cfg.write_text("{broken")
        code, _, err = run(capsys, "gen-data", "--out",
                           str(tmp_path / "c.jsonl"), "--config", str(cfg))
        assert code == 1
        assert "invalid JSON" in err

    def test_non_object_config_fails(self, capsys, tmp_path):
        cfg = tmp_path / "g.json"
        cfg.write_text("[1, 2]")
        code, _, err = run(capsys, "gen-data", "--out",
                           str(tmp_path / "c.jsonl"), "--config", str(cfg))
        assert code == 1
        assert "JSON object" in err

    def test_wrong_value_type_fails(self, capsys, tmp_path):
        cfg = tmp_path / "g.json"
        cfg.write_text(json.dumps({"entities": "lots"}))
        code, _, err = run(capsys, "gen-data", "--out",
                           str(tmp_path / "c.jsonl"), "--config", str(cfg))
        assert code == 1
        assert "must be int" in err


class TestValidate:
    def test_clean_corpus_passes(self, ws, capsys):
        code, out, _ = run(capsys, "validate", "--corpus",
                           str(ws["corpus"]))
        assert code == 0
        assert "0 violations" in out

    def test_broken_line_reports_number(self, capsys, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"kind": "triple"}\n')
        code, _, err = run(capsys, "validate", "--corpus", str(bad))
        assert code == 1
        assert "line 1" in err

    def test_missing_file_fails(self, capsys, tmp_path):
        code, _, err = run(capsys, "validate", "--corpus",
                           str(tmp_path / "nope.jsonl"))
        assert code == 1
        assert "error:" in err


class TestTrain:
    def test_writes_checkpoint_and_metrics(self, ws, capsys):
        assert ws["ckpt"].exists()
        params = load_checkpoint(ws["ckpt"])
        assert params.config.d_model == 8
        metrics = ws["root"] / "model.ckpt.metrics.csv"
        lines = metrics.read_text().splitlines()
        assert lines[0].startswith("step,")
        assert len(lines) == 4

    def test_deterministic_artifacts(self, ws, capsys, tmp_path):
        outs = []
        for name in ("m1.ckpt", "m2.ckpt"):
            out = tmp_path / name
            assert run(capsys, "train", "--corpus", str(ws["corpus"]),
                       "--config", str(ws["train_cfg"]), "--out", str(out),
                       "--seed", "3", "--steps", "2")[0] == 0
            outs.append((out.read_bytes(),
                         (tmp_path / (name + ".metrics.csv")).read_bytes()))
        assert outs[0][0] == outs[1][0]
        assert outs[0][1] == outs[1][1]

    def test_reports_final_metrics(self, ws, capsys, tmp_path):
        code, out, _ = run(capsys, "train", "--corpus", str(ws["corpus"]),
                           "--config", str(ws["train_cfg"]),
                           "--out", str(tmp_path / "m.ckpt"),
                           "--steps", "1")
        assert code == 0
        assert "trained 1 steps" in out
        assert "total_loss=" in out

    def test_unknown_weight_fails(self, ws, capsys, tmp_path):
        cfg = tmp_path / "t.json"
        cfg.write_text(json.dumps({"weights": {"mlm": 1.0, "typo": 2.0}}))
        code, _, err = run(capsys, "train", "--corpus", str(ws["corpus"]),
                           "--config", str(cfg),
                           "--out", str(tmp_path / "m.ckpt"), "--steps", "1")
        assert code == 1
        assert "unknown objective weights" in err and "typo" in err

    def test_weights_must_be_object(self, ws, capsys, tmp_path):
        cfg = tmp_path / "t.json"
        cfg.write_text(json.dumps({"weights": [1, 2, 3]}))
        code, _, err = run(capsys, "train", "--corpus", str(ws["corpus"]),
                           "--config", str(cfg),
                           "--out", str(tmp_path / "m.ckpt"), "--steps", "1")
        assert code == 1
        assert "'weights' must be an object" in err

    def test_layer_groups_must_be_list(self, ws, capsys, tmp_path):
        cfg = tmp_path / "t.json"
        cfg.write_text(json.dumps({"layer_groups": {"stream": "language"}}))
        code, _, err = run(capsys, "train", "--corpus", str(ws["corpus"]),
                           "--config", str(cfg),
                           "--out", str(tmp_path / "m.ckpt"), "--steps", "1")
        assert code == 1
        assert "'layer_groups' must be a list" in err


class TestEval:
    def test_reports_all_sections(self, ws, capsys):
        code, out, _ = run(capsys, "eval", "--corpus", str(ws["corpus"]),
                           "--config", str(ws["ckpt_cfg"]), "--k", "4")
        assert code == 0
        assert "link prediction (heldout): mrr=" in out
        assert "role consistency:" in out
        for lam in ("0", "0.25", "0.5", "1"):
            assert f"lambda={lam} " in out

    def test_deterministic_output(self, ws, capsys):
        a = run(capsys, "eval", "--corpus", str(ws["corpus"]),
                "--config", str(ws["ckpt_cfg"]))
        b = run(capsys, "eval", "--corpus", str(ws["corpus"]),
                "--config", str(ws["ckpt_cfg"]))
        assert a == b
        assert a[0] == 0

    def test_requires_checkpoint_key(self, ws, capsys, tmp_path):
        cfg = tmp_path / "e.json"
        cfg.write_text("{}")
        code, _, err = run(capsys, "eval", "--corpus", str(ws["corpus"]),
                           "--config", str(cfg))
        assert code == 1
        assert "needs a 'checkpoint' key" in err

    def test_lambdas_validated(self, ws, capsys, tmp_path):
        cfg = tmp_path / "e.json"
        cfg.write_text(json.dumps({"checkpoint": str(ws["ckpt"]),
                                   "lambdas": ["half"]}))
        code, _, err = run(capsys, "eval", "--corpus", str(ws["corpus"]),
                           "--config", str(cfg))
        assert code == 1
        assert "list of numbers" in err


@pytest.fixture(scope="module")
def repo_path(ws):
    out = ws["root"] / "facts.repo"
    code = main(["repo-build", "--corpus", str(ws["corpus"]),
                 "--config", str(ws["ckpt_cfg"]), "--out", str(out),
                 "--seed", "0"])
    assert code == 0
    return out


class TestRepoBuildAndQuery:
    def test_build_reports_counts(self, ws, capsys, tmp_path):
        out = tmp_path / "r.repo"
        code, text, _ = run(capsys, "repo-build", "--corpus",
                            str(ws["corpus"]), "--config",
                            str(ws["ckpt_cfg"]), "--out", str(out))
        assert code == 0
        assert out.exists()
        assert "items" in text and "centroids" in text

    def test_build_deterministic(self, ws, capsys, tmp_path):
        blobs = []
        for name in ("a.repo", "b.repo"):
            p = tmp_path / name
            assert run(capsys, "repo-build", "--corpus", str(ws["corpus"]),
                       "--config", str(ws["ckpt_cfg"]), "--out", str(p),
                       "--seed", "5")[0] == 0
            blobs.append(p.read_bytes())
        assert blobs[0] == blobs[1]

    def test_query_lists_exact_and_approx(self, ws, repo_path, capsys,
                                          tmp_path):
        cfg = tmp_path / "q.json"
        cfg.write_text(json.dumps({"repository": str(repo_path)}))
        code, out, _ = run(capsys, "repo-query", "--config", str(cfg),
                           "--seed", "1", "--k", "3")
        assert code == 0
        lines = out.splitlines()
        assert lines[0].split("\t") == ["rank", "score", "slot", "instance",
                                        "token_id", "provenance", "method"]
        methods = {l.split("\t")[-1] for l in lines[1:]}
        assert methods == {"exact", "approx"}
        # both passes rank their best hit first
        exact = [l for l in lines[1:] if l.endswith("exact")]
        assert exact[0].split("\t")[0] == "1"

    def test_query_deterministic(self, ws, repo_path, capsys, tmp_path):
        cfg = tmp_path / "q.json"
        cfg.write_text(json.dumps({"repository": str(repo_path)}))
        a = run(capsys, "repo-query", "--config", str(cfg), "--seed", "2")
        b = run(capsys, "repo-query", "--config", str(cfg), "--seed", "2")
        assert a == b

    def test_explicit_query_vector(self, ws, repo_path, capsys, tmp_path):
        repo_dim = 8
        cfg = tmp_path / "q.json"
        cfg.write_text(json.dumps({"repository": str(repo_path),
                                   "query": [0.1] * repo_dim}))
        code, out, _ = run(capsys, "repo-query", "--config", str(cfg))
        assert code == 0
        assert "exact" in out

    def test_query_length_checked(self, ws, repo_path, capsys, tmp_path):
        cfg = tmp_path / "q.json"
        cfg.write_text(json.dumps({"repository": str(repo_path),
                                   "query": [0.1, 0.2]}))
        code, _, err = run(capsys, "repo-query", "--config", str(cfg))
        assert code == 1
        assert "2 coordinates" in err

    def test_query_type_checked(self, ws, repo_path, capsys, tmp_path):
        cfg = tmp_path / "q.json"
        cfg.write_text(json.dumps({"repository": str(repo_path),
                                   "query": ["x"] * 8}))
        code, _, err = run(capsys, "repo-query", "--config", str(cfg))
        assert code == 1
        assert "list of numbers" in err

    def test_empty_repository_succeeds(self, capsys, tmp_path):
        repo = Repository(4)
        repo.frozen = True
        p = tmp_path / "empty.repo"
        persist(repo, p)
        cfg = tmp_path / "q.json"
        cfg.write_text(json.dumps({"repository": str(p)}))
        code, out, _ = run(capsys, "repo-query", "--config", str(cfg))
        assert code == 0
        assert "empty repository" in out

    def test_requires_repository_key(self, capsys, tmp_path):
        cfg = tmp_path / "q.json"
        cfg.write_text("{}")
        code, _, err = run(capsys, "repo-query", "--config", str(cfg))
        assert code == 1
        assert "needs a 'repository' key" in err


class TestRopeCheck:
    def test_passes_at_default_width(self, capsys):
        code, out, _ = run(capsys, "rope-check", "--seed", "0")
        assert code == 0
        assert "dim 32" in out
        gap = float(out.split("max gap ")[1])
        assert gap <= 1e-9

    def test_small_width(self, capsys):
        code, out, _ = run(capsys, "rope-check", "--dim", "2",
                           "--positions", "16")
        assert code == 0

    def test_odd_width_rejected(self, capsys):
        code, _, err = run(capsys, "rope-check", "--dim", "7")
        assert code == 1
        assert "even" in err

    def test_positions_validated(self, capsys):
        code, _, err = run(capsys, "rope-check", "--positions", "0")
        assert code == 1
        assert "positions" in err


class TestInspectAttention:
    def test_writes_csv_and_pgm_per_head(self, ws, capsys, tmp_path):
        prefix = tmp_path / "attn"
        code, out, _ = run(capsys, "inspect-attention", "--corpus",
                           str(ws["corpus"]), "--config",
                           str(ws["ckpt_cfg"]), "--out", str(prefix))
        assert code == 0
        for head in (0, 1):
            base = tmp_path / f"attn-L0H{head}"
            csv_path = base.with_suffix(".csv")
            pgm_path = base.with_suffix(".pgm")
            assert csv_path.exists() and pgm_path.exists()
            rows = [line.split(",") for line in
                    csv_path.read_text().splitlines()]
            for row in rows:
                vals = [float(v) for v in row]
                assert abs(sum(vals) - 1.0) < 1e-9
            pgm = pgm_path.read_text().splitlines()
            assert pgm[0] == "P2"
            w, h = map(int, pgm[1].split())
            assert (h, w) == (len(rows), len(rows[0]))
            assert pgm[2] == "255"
            pix = [int(v) for line in pgm[3:] for v in line.split()]
            assert len(pix) == w * h
            assert all(0 <= v <= 255 for v in pix)

    def test_filter_to_one_head(self, ws, capsys, tmp_path):
        prefix = tmp_path / "one"
        code, _, _ = run(capsys, "inspect-attention", "--corpus",
                         str(ws["corpus"]), "--config", str(ws["ckpt_cfg"]),
                         "--out", str(prefix), "--layer", "0", "--head", "1")
        assert code == 0
        assert (tmp_path / "one-L0H1.csv").exists()
        assert not (tmp_path / "one-L0H0.csv").exists()

    def test_out_of_range_selection_fails(self, ws, capsys, tmp_path):
        code, _, err = run(capsys, "inspect-attention", "--corpus",
                           str(ws["corpus"]), "--config",
                           str(ws["ckpt_cfg"]),
                           "--out", str(tmp_path / "x"), "--layer", "5")
        assert code == 1
        assert "no attention captured" in err
