"""End-to-end command-line behavior: exit codes, flags, printed output."""

import copy
import json
import subprocess
import sys

import pytest

from vidcloze import checkpoint as ckpt
from vidcloze import cli
from vidcloze import fusion
from vidcloze import harness
from vidcloze import synthdata as sd

TINY = dict(
    seed=0, n_pairs=16, n_qa_train=12, n_qa_test=6,
    feature_dim=8, frames=4,
    hidden_dim=16, n_layers=2, n_heads=2, ffn_dim=32,
    max_positions=48, text_len=40, dropout_p=0.0,
    pretrain_steps=10, pretrain_batch=8,
    crossmodal_epochs=1, crossmodal_batch=8,
    finetune_epochs=1, finetune_batch=4,
    adapter_dim=4,
)


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = harness.RunConfig(**TINY)
    world = cfg.world_config()
    corpus = sd.gen_text_corpus(world)
    bilm, _ = harness.pretrain_pipeline(cfg, corpus)
    ckpt.save_bilm(bilm, str(root / "bilm.fblm"))
    vlm = fusion.build_model(copy.deepcopy(bilm), d_visual=cfg.feature_dim,
                             prompt_len=cfg.frames,
                             adapter_dim=cfg.adapter_dim, seed=cfg.seed)
    ckpt.save_vlm(vlm, str(root / "vlm.fblm"))
    (root / "run.json").write_text(json.dumps(cfg.to_dict()))
    for split in ("train", "test"):
        data = sd.gen_qa(world, "open_ended", split)
        harness.save_dataset(data, str(root / f"{split}.jsonl"),
                             str(root / f"{split}.fbft"))
    return root


def run_json(env):
    return ["--config", str(env / "run.json")]


class TestParsing:
    def test_no_command(self, capsys):
        assert cli.cli_main([]) == 1
        assert "usage error" in capsys.readouterr().err

    def test_unknown_command(self):
        assert cli.cli_main(["juggle"]) == 1

    def test_unknown_flag(self):
        assert cli.cli_main(["eval", "--sideways"]) == 1

    def test_missing_required(self):
        assert cli.cli_main(["pretrain-text"]) == 1

    def test_console_script_help(self):
        proc = subprocess.run(["vidcloze", "--help"], capture_output=True,
                              text=True)
        assert proc.returncode == 0
        assert "run-grid" in proc.stdout


class TestSeeds:
    def test_default_seed_env(self, monkeypatch):
        monkeypatch.setenv("FBLM_SEED", "7")
        assert cli._default_seed() == 7
        monkeypatch.delenv("FBLM_SEED")
        assert cli._default_seed() == 0

    def test_bad_seed_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("FBLM_SEED", "lots")
        assert cli.cli_main(["gen-data", "--out", str(tmp_path)]) == 1

    def test_seed_precedence(self, env, monkeypatch):
        parser = cli.build_parser()
        args = parser.parse_args(["gen-data", "--out", "x"] + run_json(env)
                                 + ["--seed", "9"])
        assert cli._load_config(args).seed == 9
        args = parser.parse_args(["gen-data", "--out", "x"] + run_json(env))
        assert cli._load_config(args).seed == 0
        monkeypatch.setenv("FBLM_SEED", "5")
        args = parser.parse_args(["gen-data", "--out", "x"])
        assert cli._load_config(args).seed == 5


class TestGenData:
    def test_writes_manifest(self, env, tmp_path, capsys):
        out = tmp_path / "data"
        assert cli.cli_main(["gen-data", "--out", str(out)]
                            + run_json(env)) == 0
        printed = capsys.readouterr().out
        assert "corpus:" in printed
        assert (out / "corpus.txt").exists()
        assert (out / "qa_multi_choice_test.jsonl").exists()


class TestPretrain:
    def test_steps_override_and_metrics(self, env, tmp_path, capsys):
        out = tmp_path / "lm.fblm"
        metrics = tmp_path / "m.json"
        code = cli.cli_main(["pretrain-text", "--out", str(out), "--steps",
                             "5", "--metrics", str(metrics)] + run_json(env))
        assert code == 0
        assert "pretrained 5 steps" in capsys.readouterr().out
        assert len(json.loads(metrics.read_text())["losses"]) == 5
        ckpt.load_bilm(str(out))

    def test_corpus_file(self, tmp_path):
        corpus = tmp_path / "corpus.txt"
        corpus.write_text("the red ball is rolling .\n"
                          "a blue dog is sleeping .\n")
        out = tmp_path / "lm.fblm"
        code = cli.cli_main(["pretrain-text", "--corpus", str(corpus),
                             "--out", str(out), "--steps", "2"])
        assert code == 0
        assert ckpt.load_bilm(str(out)).vocab.size > 4


class TestCrossmodal:
    def test_train_and_save(self, env, tmp_path, capsys):
        out = tmp_path / "vlm.fblm"
        code = cli.cli_main(["train-crossmodal", "--checkpoint",
                             str(env / "bilm.fblm"), "--out", str(out)]
                            + run_json(env))
        assert code == 0
        assert "frozen_with_adapters" in capsys.readouterr().out
        model = ckpt.load_vlm(str(out))
        assert model.variant == "frozen_with_adapters"

    def test_pairs_needs_features(self, env, tmp_path):
        code = cli.cli_main(["train-crossmodal", "--checkpoint",
                             str(env / "bilm.fblm"), "--pairs", "p.jsonl",
                             "--out", str(tmp_path / "x.fblm")]
                            + run_json(env))
        assert code == 1

    def test_variant_flag(self, env, tmp_path):
        out = tmp_path / "r.fblm"
        code = cli.cli_main(["train-crossmodal", "--checkpoint",
                             str(env / "bilm.fblm"), "--variant", "random_lm",
                             "--out", str(out)] + run_json(env))
        assert code == 0
        assert ckpt.load_vlm(str(out)).variant == "random_lm"


class TestEval:
    def test_dataset_eval_prints_accuracy(self, env, tmp_path, capsys):
        metrics = tmp_path / "m.json"
        code = cli.cli_main(["eval", "--checkpoint", str(env / "vlm.fblm"),
                             "--dataset", str(env / "test.jsonl"),
                             "--features", str(env / "test.fbft"),
                             "--answers-from", str(env / "train.jsonl"),
                             "--metrics", str(metrics)] + run_json(env))
        assert code == 0
        out = capsys.readouterr().out
        assert out.startswith("accuracy ")
        doc = json.loads(metrics.read_text())
        assert 0.0 <= doc["accuracy"] <= 1.0

    def test_modality_flags(self, env, capsys):
        code = cli.cli_main(["eval", "--checkpoint", str(env / "vlm.fblm"),
                             "--dataset", str(env / "test.jsonl"),
                             "--features", str(env / "test.fbft"),
                             "--answers-from", str(env / "train.jsonl"),
                             "--no-subtitles", "--no-suffix"] + run_json(env))
        assert code == 0
        assert "accuracy " in capsys.readouterr().out

    def test_bare_bilm_needs_no_video(self, env, capsys):
        args = ["eval", "--checkpoint", str(env / "bilm.fblm"),
                "--dataset", str(env / "test.jsonl"),
                "--features", str(env / "test.fbft"),
                "--answers-from", str(env / "train.jsonl")] + run_json(env)
        assert cli.cli_main(args) == 1
        assert "train-crossmodal" in capsys.readouterr().err
        assert cli.cli_main(args + ["--no-video"]) == 0

    def test_missing_checkpoint(self, env, tmp_path):
        code = cli.cli_main(["eval", "--checkpoint",
                             str(tmp_path / "nothing.fblm"), "--no-video"]
                            + run_json(env))
        assert code == 2


class TestFinetune:
    def test_trains_and_saves(self, env, tmp_path, capsys):
        out = tmp_path / "tuned.fblm"
        code = cli.cli_main(["finetune", "--checkpoint", str(env / "vlm.fblm"),
                             "--dataset", str(env / "train.jsonl"),
                             "--features", str(env / "train.fbft"),
                             "--fraction", "0.5", "--out", str(out)]
                            + run_json(env))
        assert code == 0
        assert "finetuned on fraction 0.5" in capsys.readouterr().out
        ckpt.load_vlm(str(out))

    def test_zero_fraction(self, env, tmp_path):
        code = cli.cli_main(["finetune", "--checkpoint", str(env / "vlm.fblm"),
                             "--fraction", "0", "--out",
                             str(tmp_path / "x.fblm")] + run_json(env))
        assert code == 2


class TestInspection:
    def test_dump_attention(self, env, tmp_path):
        out = tmp_path / "attn.csv"
        renorm = tmp_path / "renorm.csv"
        code = cli.cli_main(["dump-attention", "--checkpoint",
                             str(env / "vlm.fblm"),
                             "--dataset", str(env / "test.jsonl"),
                             "--features", str(env / "test.fbft"),
                             "--layer", "1", "--out", str(out),
                             "--renorm", str(renorm)] + run_json(env))
        assert code == 0
        assert out.read_text().startswith("query,")
        assert renorm.read_text().startswith("key,")

    def test_dump_attention_bad_index(self, env, tmp_path):
        code = cli.cli_main(["dump-attention", "--checkpoint",
                             str(env / "vlm.fblm"),
                             "--dataset", str(env / "test.jsonl"),
                             "--features", str(env / "test.fbft"),
                             "--index", "99", "--layer", "0",
                             "--out", str(tmp_path / "a.csv")] + run_json(env))
        assert code == 1

    def test_dump_attention_bad_layer(self, env, tmp_path):
        code = cli.cli_main(["dump-attention", "--checkpoint",
                             str(env / "vlm.fblm"),
                             "--dataset", str(env / "test.jsonl"),
                             "--features", str(env / "test.fbft"),
                             "--layer", "9", "--out",
                             str(tmp_path / "a.csv")] + run_json(env))
        assert code == 2

    def test_param_report(self, env, capsys):
        code = cli.cli_main(["param-report", "--checkpoint",
                             str(env / "vlm.fblm")])
        assert code == 0
        assert "parameter budget" in capsys.readouterr().out

    def test_grad_check(self, capsys):
        code = cli.cli_main(["grad-check", "--probes", "6"])
        assert code == 0
        assert "[PASS]" in capsys.readouterr().out


class TestRunGrid:
    def test_full_sweep(self, env, tmp_path, capsys):
        out = tmp_path / "grid.csv"
        code = cli.cli_main(["run-grid", "--out", str(out)] + run_json(env))
        assert code == 0
        printed = capsys.readouterr().out
        assert "grid rows" in printed
        assert "random_lm_strictly_worst" in printed
        header = out.read_text().splitlines()[0]
        assert header == ",".join(harness.GRID_COLUMNS)
        n_rows = len(out.read_text().splitlines()) - 1
        assert n_rows == 4 * len(harness.GRID_FRACTIONS) * 4
