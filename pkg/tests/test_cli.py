import json
from pathlib import Path

import numpy as np
import pytest

import latentq.runs as runs
from conftest import template_oracles
from latentq.cli import main
from latentq.datakit import ToyWorldConfig, build_vocab, load_world, toy_inventory
from latentq.metrics import TEMetrics
from latentq.objectives import ObjectiveSpec, train_step
from latentq.pipeline import ModelBundle
from latentq.runs import (
    ConfigError,
    RunConfig,
    answer_pretrain_pairs,
    cmd_eval,
    cmd_gen_data,
    cmd_infer,
    cmd_pretrain,
    cmd_train,
    load_models,
)
from latentq.seqmodel import TinySeq2Seq, load_checkpoint
from latentq.vocab import Vocab

WORLD_CFG = ToyWorldConfig(
    n_entities=6,
    n_train_relations=3,
    n_dev_relations=1,
    n_test_relations=2,
    contexts_per_relation=6,
    tails_per_relation=3,
    seed=0,
)


def small_run(world, ckpt="", out="", **kw):
    base = dict(
        world_dir=str(world), ckpt_dir=str(ckpt), out_dir=str(out),
        dim=8, pretrain_epochs=2, pretrain_lr=0.1, batch_size=16, seed=0,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "world"
    cmd_gen_data(WORLD_CFG, out, pretrain_examples=120)
    return out


@pytest.fixture(scope="module")
def pre_dir(world_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "pre"
    cmd_pretrain(small_run(world_dir, out=out))
    return out


def dir_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir()) if p.is_file()}


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.objective == "offmml_g"
        assert cfg.lr == 0.0005
        assert cfg.eval_every == 100
        assert cfg.epochs == 1
        assert cfg.batch_size == 16
        assert (cfg.p, cfg.n_samples, cfg.beam_size) == (0.95, 8, 8)

    @pytest.mark.parametrize(
        "bad",
        [
            {"objective": "reinforce"},
            {"lr": 0.0},
            {"lr": -1.0},
            {"batch_size": 0},
            {"eval_every": 0},
            {"epochs": 0},
            {"dim": 0},
            {"init_scale": 0.0},
            {"question_mode": "latent"},
            {"marginal_k": 0},
        ],
    )
    def test_validation(self, bad):
        with pytest.raises(ConfigError):
            RunConfig(**bad)

    def test_sampler_mapping(self):
        cfg = RunConfig(p=0.8, n_samples=5, beam_size=3, max_len=7, seed=9)
        s = cfg.sampler()
        assert (s.p, s.n_samples, s.beam_size, s.max_len, s.seed) == (0.8, 5, 3, 7, 9)

    def test_from_sources_precedence(self, tmp_path):
        f = tmp_path / "cfg.json"
        f.write_text(json.dumps({"lr": 0.01, "epochs": 3, "objective": "mml_mml"}))
        cfg = RunConfig.from_sources(str(f), {"lr": 0.02, "seed": None})
        assert cfg.lr == 0.02  # flag beats file
        assert cfg.epochs == 3  # file beats default
        assert cfg.objective == "mml_mml"
        assert cfg.seed == 0  # None flags fall through to defaults

    def test_from_sources_unknown_key(self, tmp_path):
        f = tmp_path / "cfg.json"
        f.write_text(json.dumps({"learning_rate": 0.01}))
        with pytest.raises(ConfigError, match="learning_rate"):
            RunConfig.from_sources(str(f), {})

    def test_from_sources_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            RunConfig.from_sources("/nonexistent/cfg.json", {})

    def test_from_sources_bad_json(self, tmp_path):
        f = tmp_path / "cfg.json"
        f.write_text("{nope")
        with pytest.raises(ConfigError, match="JSON"):
            RunConfig.from_sources(str(f), {})
        f.write_text("[1, 2]")
        with pytest.raises(ConfigError, match="object"):
            RunConfig.from_sources(str(f), {})


class TestGenData:
    def test_same_seed_identical_directories(self, tmp_path):
        rc = main(["gen-data", "--out", str(tmp_path / "a"), "--seed", "7",
                   "--contexts", "4", "--pretrain-examples", "20"])
        assert rc == 0
        assert main(["gen-data", "--out", str(tmp_path / "b"), "--seed", "7",
                     "--contexts", "4", "--pretrain-examples", "20"]) == 0
        assert dir_bytes(tmp_path / "a") == dir_bytes(tmp_path / "b")

    def test_negs_doubles_train_lines(self, tmp_path):
        main(["gen-data", "--out", str(tmp_path / "plain"), "--contexts", "4"])
        main(["gen-data", "--out", str(tmp_path / "negs"), "--contexts", "4", "--negs"])
        plain = (tmp_path / "plain" / "train.jsonl").read_text().splitlines()
        negs = (tmp_path / "negs" / "train.jsonl").read_text().splitlines()
        assert len(negs) == 2 * len(plain)

    def test_relations_echoed_in_manifest(self, tmp_path):
        main(["gen-data", "--out", str(tmp_path / "w"), "--relations", "2,1,2",
              "--contexts", "3"])
        manifest = json.loads((tmp_path / "w" / "manifest.json").read_text())
        cfg = manifest["config"]
        assert cfg["n_train_relations"] == 2
        assert cfg["n_dev_relations"] == 1
        assert cfg["n_test_relations"] == 2
        fold, _ = load_world(tmp_path / "w")
        assert len(fold.train) == 6 and len(fold.test) == 6

    @pytest.mark.parametrize("rels", ["2,1", "a,b,c"])
    def test_malformed_relations_exit_2(self, tmp_path, rels, capsys):
        assert main(["gen-data", "--out", str(tmp_path / "w"), "--relations", rels]) == 2
        assert "config error" in capsys.readouterr().err

    def test_impossible_counts_exit_2(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "w"), "--entities", "0"]) == 2

    def test_pretrain_corpora_written_with_offset_seed(self, world_dir):
        a = (world_dir / "pretrain.jsonl").read_text().splitlines()
        q = (world_dir / "pretrain_q.jsonl").read_text().splitlines()
        assert len(a) == len(q) == 120
        assert a != q


class TestPretrain:
    def test_layout_and_search_copy(self, pre_dir):
        names = {p.name for p in pre_dir.iterdir()}
        assert {"vocab.txt", "q.json", "a.json", "s.json", "pretrain_log.jsonl"} <= names
        assert (pre_dir / "s.json").read_bytes() == (pre_dir / "q.json").read_bytes()

    def test_losses_fall(self, pre_dir):
        recs = [json.loads(l) for l in (pre_dir / "pretrain_log.jsonl").read_text().splitlines()]
        assert recs[-1]["q_loss"] < recs[0]["q_loss"]
        assert recs[-1]["a_loss"] < recs[0]["a_loss"]

    def test_pretrained_answerer_beats_random_init(self, world_dir, pre_dir):
        from latentq.datakit import gen_pretrain_corpus

        models = load_models(pre_dir)
        vocab = models.answer.vocab
        held_out = gen_pretrain_corpus(WORLD_CFG, 60, seed=999)
        ins, outs = answer_pretrain_pairs(vocab, held_out)
        random_a = TinySeq2Seq(
            vocab, dim=8, max_len=models.answer.max_len,
            allow_tokens=models.answer.allow_tokens, seed=0, init_scale=0.5,
        )
        trained = float(np.sum(models.answer.log_prob_many(ins, outs)))
        untrained = float(np.sum(random_a.log_prob_many(ins, outs)))
        assert trained > untrained

    def test_repeat_run_bit_identical(self, world_dir, pre_dir, tmp_path):
        again = tmp_path / "pre2"
        cmd_pretrain(small_run(world_dir, out=again))
        for name in ("vocab.txt", "q.json", "a.json", "s.json", "pretrain_log.jsonl"):
            assert (again / name).read_bytes() == (pre_dir / name).read_bytes()

    def test_missing_world_flag_exit_2(self, capsys):
        assert main(["pretrain", "--out", "/tmp/x"]) == 2

    def test_missing_corpus_exit_3(self, tmp_path, capsys):
        w = tmp_path / "bare"
        cmd_gen_data(WORLD_CFG, w)  # no pretrain corpus
        rc = main(["pretrain", "--world", str(w), "--out", str(tmp_path / "o"),
                   "--dim", "8", "--pretrain-epochs", "1"])
        assert rc == 3
        assert "data error" in capsys.readouterr().err


class TestTrain:
    def test_dev_best_checkpoint_selection(self, world_dir, pre_dir, tmp_path, monkeypatch):
        queue = [0.2, 0.5, 0.4, 0.1, 0.0, 0.3]
        seen = []

        def scripted_eval(models, insts, cfg=None, question_mode="generated"):
            f1 = queue[len(seen)]
            seen.append(f1)
            return TEMetrics(0.0, 0.0, f1, 0, 0, 0)

        monkeypatch.setattr(runs, "evaluate_te", scripted_eval)
        out = tmp_path / "ft"
        cfg = small_run(world_dir, ckpt=pre_dir, out=out,
                        objective="gold_q", lr=0.05, batch_size=4, eval_every=1)
        cmd_train(cfg)
        # 18 train instances / batch 4 -> 5 steps, each evaluated, plus the
        # final eval; the step-2 model (dev F1 0.5) must be the saved one.
        assert len(seen) == 6

        fold, _ = load_world(world_dir)
        models = load_models(pre_dir)
        spec = ObjectiveSpec(kind=cfg.kind, sampler=cfg.sampler())
        shuffle = np.random.default_rng(cfg.seed)
        order = shuffle.permutation(len(fold.train))
        replay = models
        for lo in (0, 4):
            batch = [fold.train[i] for i in order[lo : lo + 4]]
            replay, _ = train_step(spec, replay, batch, cfg.lr)

        vocab = Vocab.load(out / "vocab.txt")
        saved_q = load_checkpoint(out / "q.json", vocab)
        saved_a = load_checkpoint(out / "a.json", vocab)
        assert np.array_equal(saved_a.params, replay.answer.params)
        assert np.array_equal(saved_q.params, models.question.params)

    def test_train_log_schema(self, world_dir, pre_dir, tmp_path):
        out = tmp_path / "ft_log"
        cmd_train(small_run(world_dir, ckpt=pre_dir, out=out,
                            objective="gold_q", lr=0.05, batch_size=8, eval_every=2))
        recs = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
        steps = [r for r in recs if "objective" in r]
        evals = [r for r in recs if "dev_te_f1" in r]
        assert len(steps) == 3  # ceil(18 / 8)
        assert {"step", "objective", "mean_log_PA", "ess", "skipped_instances"} <= set(steps[0])
        assert all(r["objective"] == "gold_q" for r in steps)
        assert [r["step"] for r in evals] == [2, 3]  # every 2 steps + final

    def test_offmml_leaves_search_checkpoint_alone(self, world_dir, pre_dir, tmp_path):
        world_before = dir_bytes(world_dir)
        s_before = (pre_dir / "s.json").read_bytes()
        out = tmp_path / "ft_off"
        cmd_train(small_run(world_dir, ckpt=pre_dir, out=out, objective="offmml_g",
                            lr=0.05, n_samples=2, beam_size=4))
        assert (pre_dir / "s.json").read_bytes() == s_before
        assert (out / "s.json").read_bytes() == s_before
        assert dir_bytes(world_dir) == world_before
        q = load_checkpoint(out / "q.json", Vocab.load(out / "vocab.txt"))
        pre_q = load_checkpoint(pre_dir / "q.json", Vocab.load(pre_dir / "vocab.txt"))
        assert not np.array_equal(q.params, pre_q.params)

    def test_same_seed_same_checkpoints(self, world_dir, pre_dir, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            cmd_train(small_run(world_dir, ckpt=pre_dir, out=out, objective="mml_mml",
                                lr=0.05, n_samples=2, beam_size=4, seed=5))
            outs.append(dir_bytes(out))
        assert outs[0] == outs[1]

    def test_gold_q_without_gold_questions_exit_2(self, tmp_path):
        from dataclasses import replace

        from latentq.datakit import FoldSpec, gen_toy_world, save_world

        fold = gen_toy_world(WORLD_CFG)
        stripped = FoldSpec(
            train=[replace(i, gold_question=None) for i in fold.train],
            dev=fold.dev, test=fold.test,
        )
        w = tmp_path / "nogold"
        save_world(stripped, w, {"config": {}})
        rc = main(["train", "--world", str(w), "--ckpt", "unused", "--out",
                   str(tmp_path / "o"), "--objective", "gold_q"])
        assert rc == 2

    def test_unknown_objective_exit_2(self, world_dir, pre_dir, tmp_path, capsys):
        rc = main(["train", "--world", str(world_dir), "--ckpt", str(pre_dir),
                   "--out", str(tmp_path / "o"), "--objective", "reinforce"])
        assert rc == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_paths_exit_2(self):
        assert main(["train", "--objective", "gold_q"]) == 2


class TestEval:
    def test_oracle_models_score_perfect_te(self, world_dir, tmp_path, monkeypatch):
        fold, _ = load_world(world_dir)
        vocab = build_vocab(fold.train + fold.dev + fold.test)
        _, rels = toy_inventory(WORLD_CFG)
        oracle = template_oracles(vocab, rels)
        monkeypatch.setattr(runs, "load_models", lambda d, need_search=False: oracle)
        world_before = dir_bytes(world_dir)
        out = tmp_path / "rep"
        report = cmd_eval(
            small_run(world_dir, ckpt="oracle", out=out), task="te")
        assert report.te.f1 == 1.0
        blob = json.loads((out / "report.json").read_text())
        assert blob["te"]["f1"] == 1.0
        assert {"precision", "recall", "f1", "tp", "predicted_non_null",
                "gold_positive"} <= set(blob["te"])
        assert dir_bytes(world_dir) == world_before

    def test_zre_single_candidate_trivially_perfect(self, tmp_path, monkeypatch):
        cfg_world = ToyWorldConfig(
            n_entities=5, n_train_relations=2, n_dev_relations=1,
            n_test_relations=1, contexts_per_relation=4, tails_per_relation=2, seed=2,
        )
        w = tmp_path / "w1"
        cmd_gen_data(cfg_world, w)
        fold, _ = load_world(w)
        vocab = build_vocab(fold.train + fold.dev + fold.test)
        q = TinySeq2Seq(vocab, dim=6, max_len=4, seed=0, init_scale=0.4)
        a = TinySeq2Seq(vocab, dim=6, max_len=4, seed=1, init_scale=0.4)
        monkeypatch.setattr(runs, "load_models", lambda d, need_search=False: ModelBundle(q, a))
        report = cmd_eval(small_run(w, ckpt="x", out=tmp_path / "rep1"), task="zre")
        assert report.zre.macro_f1 == 1.0
        assert report.te is None

    def test_csv_report_written(self, world_dir, tmp_path, monkeypatch):
        fold, _ = load_world(world_dir)
        vocab = build_vocab(fold.train + fold.dev + fold.test)
        _, rels = toy_inventory(WORLD_CFG)
        oracle = template_oracles(vocab, rels)
        monkeypatch.setattr(runs, "load_models", lambda d, need_search=False: oracle)
        out = tmp_path / "rep2"
        cmd_eval(small_run(world_dir, ckpt="oracle", out=out), task="te", csv_out=True)
        head = (out / "report.csv").read_text().splitlines()[0]
        assert head == "section,name,precision,recall,f1"

    def test_unknown_task_exit_2(self, world_dir, pre_dir):
        rc = main(["eval", "--world", str(world_dir), "--ckpt", str(pre_dir),
                   "--task", "f1"])
        assert rc == 2

    def test_missing_checkpoint_exit_3(self, world_dir, tmp_path, capsys):
        rc = main(["eval", "--world", str(world_dir), "--ckpt",
                   str(tmp_path / "nothing"), "--task", "te"])
        assert rc == 3
        assert "data error" in capsys.readouterr().err

    def test_end_to_end_eval_exit_0(self, world_dir, pre_dir, capsys):
        rc = main(["eval", "--world", str(world_dir), "--ckpt", str(pre_dir),
                   "--task", "te", "--beam", "2"])
        assert rc == 0
        blob = json.loads(capsys.readouterr().out)
        assert 0.0 <= blob["te"]["f1"] <= 1.0


class TestInfer:
    def test_round_trip(self, pre_dir):
        q, tail = cmd_infer(
            str(pre_dir), context="ent1 vrb0 tl0n1 . ent1 vrb3 tl3n2 .",
            head="ent1", relation="wh0", beam_size=4,
        )
        assert isinstance(q, str) and q
        assert isinstance(tail, str) and tail

    def test_pseudo_mode_skips_question(self, pre_dir):
        q, tail = cmd_infer(
            str(pre_dir), context="ent1 vrb0 tl0n1 .", head="ent1",
            relation="wh0", question_mode="pseudo", beam_size=4,
        )
        assert q == ""
        assert tail

    def test_main_prints_prediction(self, pre_dir, capsys):
        rc = main(["infer", "--ckpt", str(pre_dir), "--context",
                   "ent1 vrb0 tl0n1 .", "--head", "ent1", "--relation", "wh0"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "question:" in out and "tail:" in out
