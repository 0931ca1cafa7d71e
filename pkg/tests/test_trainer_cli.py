import csv
import dataclasses
import json
import warnings

import jsonschema
import numpy as np
import pytest
import torch

from blurret import cli
from blurret.dataset_gen import DatasetManifest
from blurret.errors import ConfigError, TrainingDiverged
from blurret.losses import ArcFaceParams, LossWeights, joint_loss
from blurret.model import BridgeConfig, DescriptorModel, EncoderConfig
from blurret.retrieval_eval import REPORT_SCHEMA, evaluate, read_descriptors
from blurret.trainer import (
    CONFIG_KEYS,
    LOG_COLUMNS,
    TrainConfig,
    embed_records,
    load_config,
    smoothed,
    train,
    train_config_from_flat,
    train_config_to_flat,
)

import fd

SMALL = dict(
    encoder=EncoderConfig(channels=[4, 8, 8, 8]),
    bridge=BridgeConfig(c_be=4, c_loc=4, c_cls=8, dim=16),
)


def toy_manifest(tiny, n=10):
    train_recs = tiny.split("train")
    objs = sorted({r.object_id for r in train_recs})[:2]
    recs = [r for r in train_recs if r.object_id == objs[0]][: n // 2]
    recs += [r for r in train_recs if r.object_id == objs[1]][: n - len(recs)]
    assert len(recs) == n
    return dataclasses.replace(tiny, records=recs)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.batch_tuples, cfg.epochs) == (1e-4, 0.9, 0.999, 1e-8, 32, 30)
        assert (cfg.loss.alpha_cls, cfg.loss.alpha_be, cfg.loss.alpha_loc) == (0.1, 1.0, 10.0)
        assert (cfg.sampler.radius, cfg.sampler.n_pos, cfg.sampler.n_neg) == (5, 1, 5)
        assert (cfg.tau, cfg.arcface_margin, cfg.arcface_scale) == (0.7, 0.15, 30.0)

    @pytest.mark.parametrize("bad", [dict(lr=0.0), dict(epochs=0)])
    def test_invariants(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_flat_round_trip(self):
        cfg = TrainConfig(lr=3e-4, epochs=4, loss=LossWeights(0.2, 0.5, 1.0))
        assert train_config_from_flat(train_config_to_flat(cfg)) == cfg
        assert set(train_config_to_flat(cfg)) <= CONFIG_KEYS

    def test_load_config(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"config_version": 1, "lr": 0.01, "n_categories": 3}))
        assert load_config(p)["lr"] == 0.01
        p.write_text(json.dumps({"config_version": 2}))
        with pytest.raises(ConfigError):
            load_config(p)
        p.write_text(json.dumps({"learning_rate": 1}))
        with pytest.raises(ConfigError):
            load_config(p)
        p.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(p)


class TestTrain:
    def test_one_epoch_toy_log(self, tiny_dataset, tmp_path):
        m = toy_manifest(tiny_dataset)
        res = train(m, TrainConfig(epochs=1, **SMALL), seed=0, out_dir=tmp_path)
        assert res.steps == 1
        with open(tmp_path / "train_log.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1 and tuple(rows[0]) == LOG_COLUMNS
        assert len(LOG_COLUMNS) - 2 == 5
        assert (tmp_path / "checkpoint_epoch001.bin").exists() and (tmp_path / "checkpoint.bin").exists()

    def test_deterministic(self, tiny_dataset):
        cfg = TrainConfig(epochs=2, lr=1e-3, **SMALL)
        a = train(tiny_dataset, cfg, seed=4)
        b = train(tiny_dataset, cfg, seed=4)
        for ra, rb in zip(a.log_rows, b.log_rows):
            for k in LOG_COLUMNS[2:]:
                assert abs(ra[k] - rb[k]) <= 1e-9
        for (k, va), vb in zip(a.model.state_dict().items(), b.model.state_dict().values()):
            assert torch.equal(va, vb), k

    def test_needs_two_objects(self, tiny_dataset):
        one = [r for r in tiny_dataset.split("train") if r.object_id == tiny_dataset.split("train")[0].object_id]
        with pytest.raises(ConfigError):
            train(dataclasses.replace(tiny_dataset, records=one), TrainConfig(epochs=1), seed=0)

    def test_divergence_dumps_state(self, tiny_dataset, tmp_path):
        m = toy_manifest(tiny_dataset)
        images = np.full((10, 3, 64, 64), np.nan, dtype=np.float32)
        with pytest.raises(TrainingDiverged):
            train(m, TrainConfig(epochs=1, **SMALL), seed=0, out_dir=tmp_path, images=images)
        assert (tmp_path / "diverged_checkpoint.bin").exists()
        assert json.loads((tmp_path / "diverged.json").read_text())["step"] >= 0

    def test_joint_gradient_tiny_model(self):
        torch.manual_seed(0)
        model = DescriptorModel(EncoderConfig(channels=[3, 4]), BridgeConfig(c_be=2, c_loc=2, c_cls=3, dim=4))
        model = model.double()
        rng = np.random.default_rng(0)
        x = torch.tensor(rng.uniform(size=(2 * 7, 3, 4, 4)), dtype=torch.float64)
        bs = torch.tensor(rng.uniform(0, 0.6, (2, 7)), dtype=torch.float64)
        bbox = torch.tensor(rng.uniform(0, 1, (2, 7, 4)), dtype=torch.float64)
        labels = torch.tensor(rng.integers(0, 3, (2, 7)))
        arc = ArcFaceParams(torch.tensor(rng.normal(size=(4, 3)), dtype=torch.float64))
        names = [n for n, _ in model.named_parameters()]
        flat0 = torch.cat([p.detach().reshape(-1) for p in model.parameters()])

        def loss(flat):
            params, i = {}, 0
            for n, p in model.named_parameters():
                params[n] = flat[i : i + p.numel()].reshape(p.shape)
                i += p.numel()
            out = torch.func.functional_call(model, params, (x,))
            out = type(out)(*(o.reshape(2, 7, *o.shape[1:]) for o in out))
            return joint_loss(out, bs, bbox, labels, arc, LossWeights()).joint

        assert names and fd.random_direction_check(loss, flat0, rng, n_dirs=10) <= 1e-3

    def test_smoothing(self):
        assert np.allclose(smoothed(np.arange(30.0), 10), np.arange(4.5, 25.0))
        assert len(smoothed([1.0, 2.0], 20)) == 2


@pytest.mark.slow
def test_loss_decreases_on_desk_data(tmp_path):
    from blurret.dataset_gen import DataConfig, build_dataset

    m = build_dataset(DataConfig(), seed=0, out_dir=tmp_path)
    res = train(m, TrainConfig(lr=1e-3, max_steps=200, epochs=10), seed=0)
    joint = [r["L_joint"] for r in res.log_rows]
    assert res.steps == 200
    assert smoothed(joint, 20)[-1] < joint[0]


class TestCLI:
    @pytest.fixture(scope="class")
    @classmethod
    def pipeline(cls, tiny_dataset, tmp_path_factory):
        out = tmp_path_factory.mktemp("cli")
        cfg = out / "cfg.json"
        cfg.write_text(json.dumps({"config_version": 1, "epochs": 1, "batch_tuples": 8}))
        manifest = str(tiny_dataset.root / "manifest.jsonl")
        assert cli.main(["train", "--config", str(cfg), "--manifest", manifest, "--seed", "0", "--out", str(out / "t")]) == 0
        for split, name in (("test-query", "q.bin"), ("test-database", "db.bin")):
            assert cli.main(["embed", "--checkpoint", str(out / "t" / "checkpoint.bin"), "--manifest", manifest,
                             "--split", split, "--out", str(out / name)]) == 0
        return out

    def test_eval_report(self, pipeline, capsys):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            code = cli.main(["eval", "--queries", str(pipeline / "q.bin"), "--database", str(pipeline / "db.bin"),
                             "--cutoff", "100", "--per-bl-matrix", "--out", str(pipeline / "r.json")])
        assert code == 0
        rep = json.loads((pipeline / "r.json").read_text())
        jsonschema.validate(rep, REPORT_SCHEMA)
        assert rep["cutoff"] == 100 and len(rep["matrix"]) == 6
        assert json.loads(capsys.readouterr().out) == rep

    def test_embed_round_trip_matches_in_process(self, pipeline, tiny_dataset):
        from blurret.model import load_model

        model, _, _ = load_model(pipeline / "t" / "checkpoint.bin")
        q = embed_records(model, tiny_dataset.root, tiny_dataset.split("test-query"))
        db = embed_records(model, tiny_dataset.root, tiny_dataset.split("test-database"))
        q2, db2 = read_descriptors(pipeline / "q.bin"), read_descriptors(pipeline / "db.bin")
        np.testing.assert_array_equal(q.matrix, q2.matrix)
        assert evaluate(q, db) == evaluate(q2, db2)

    def test_blur_stats(self, tiny_dataset, capsys):
        assert cli.main(["blur-stats", "--manifest", str(tiny_dataset.root / "manifest.jsonl")]) == 0
        stats = json.loads(capsys.readouterr().out)
        assert sum(sum(s["by_bl"].values()) for s in stats["splits"].values()) == stats["total"] == len(tiny_dataset.records)
        assert cli.main(["blur-stats", "--manifest", str(tiny_dataset.root / "manifest.jsonl"), "--format", "table"]) == 0
        assert capsys.readouterr().out.splitlines()[0].split()[:2] == ["split", "total"]

    def test_gen_data(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n_categories": 2, "objects_per_category": 3, "trajectories_per_object": 2,
                                   "images_per_trajectory": 3, "balance_ratio": None}))
        assert cli.main(["gen-data", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "d")]) == 0
        m = DatasetManifest.read(tmp_path / "d" / "manifest.jsonl")
        assert json.loads(capsys.readouterr().out)["records"] == len(m.records)

    @pytest.mark.parametrize("argv", [
        ["eval", "--queries", "missing.bin", "--database", "missing.bin"],
        ["embed", "--checkpoint", "nope.bin", "--manifest", "nope.jsonl", "--out", "x.bin"],
        ["train", "--manifest", "nope.jsonl", "--seed", "0", "--out", "t"],
        ["blur-stats", "--manifest", "nope.jsonl"],
        ["gen-data", "--config", "nope.json", "--seed", "0", "--out", "d"],
        ["eval", "--database", "x.bin"],
    ])
    def test_bad_input_exit_2(self, argv, capsys, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert cli.main(argv) == 2
        err = json.loads(capsys.readouterr().err)
        assert set(err) == {"error", "message"}

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n_categorys": 2}))
        assert cli.main(["gen-data", "--config", str(cfg), "--seed", "0", "--out", str(tmp_path / "d")]) == 2
        assert "n_categorys" in json.loads(capsys.readouterr().err)["message"]

    def test_seed_required(self, capsys):
        assert cli.main(["gen-data", "--out", "d"]) == 2
        assert cli.main(["train", "--manifest", "m", "--out", "t"]) == 2

    def test_bad_cutoff(self, pipeline, capsys):
        code = cli.main(["eval", "--queries", str(pipeline / "q.bin"), "--database", str(pipeline / "db.bin"), "--cutoff", "ten"])
        assert code == 2
