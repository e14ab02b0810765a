"""Tests for the optimizer, training loop, metrics, and checkpoints."""

import csv
import json

import numpy as np
import pytest

from neural_atoms.autodiff import Tensor
from neural_atoms.graphs import (DatasetError, MolecularGraph, batch_graphs,
                                 generate_lri_task, save_dataset)
from neural_atoms.model import ConfigError, GraphPropertyModel, TrainConfig
from neural_atoms.training import (
    Adam,
    TrainingError,
    dataset_dimensions,
    evaluate,
    load_checkpoint,
    mean_reciprocal_rank,
    save_checkpoint,
    train,
    _contact_reciprocal_ranks,
)


def lri_config(tmp_path, name="run", **overrides):
    data = tmp_path / "train.jsonl"
    if not data.exists():
        save_dataset(generate_lri_task(32, 6, 3, seed=7), data)
    base = dict(dataset=str(data), out=str(tmp_path / name), layers=2,
                hidden=8, heads=2, proportion=0.5, epochs=2, lr=0.01,
                batch=8, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def pair_graph(rng, n=6, feature_dim=3):
    return MolecularGraph(
        num_nodes=n, edges=[(i, i + 1) for i in range(n - 1)],
        node_features=rng.normal(size=(n, feature_dim)),
        pair_labels=[(0, n - 1, 1), (0, 1, 0), (1, 3, 0), (2, 5, 0)])


class TestAdam:
    def test_single_step_matches_hand_computation(self):
        # with fresh state every factor cancels: x <- x - lr * g / (|g| + eps)
        p = Tensor(np.array([[1.0]]), requires_grad=True)
        p.grad = np.array([[2.0]])
        Adam([p], lr=0.1).step()
        want = 1.0 - 0.1 * (2.0 / (2.0 + 1e-8))
        assert abs(p.data[0, 0] - want) < 1e-15

    def test_two_steps_follow_moment_recursion(self):
        p = Tensor(np.array([[0.5]]), requires_grad=True)
        opt = Adam([p], lr=0.05)
        m = v = 0.0
        x = 0.5
        for g in (1.5, -0.3):
            p.grad = np.array([[g]])
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9 ** opt.step_count)
            vhat = v / (1 - 0.999 ** opt.step_count)
            x -= 0.05 * mhat / (np.sqrt(vhat) + 1e-8)
        assert abs(p.data[0, 0] - x) < 1e-12

    def test_missing_gradient_is_an_error(self):
        p = Tensor(np.array([[1.0]]), requires_grad=True)
        with pytest.raises(TrainingError, match="no gradient"):
            Adam([p], lr=0.1).step()


class TestDatasetDimensions:
    def test_classification_counts_classes(self):
        graphs = generate_lri_task(10, 5, 3, seed=0)
        feature_dim, out_dim, avg = dataset_dimensions(graphs, "graph-classification")
        assert feature_dim == 4 and out_dim == 2 and avg == 5.0

    def test_regression_width_consistency(self):
        rng = np.random.default_rng(1)
        def labelled(width):
            return MolecularGraph(num_nodes=3, edges=[(0, 1)],
                                  node_features=rng.normal(size=(3, 2)),
                                  graph_label=rng.normal(size=width))
        graphs = [labelled(3), labelled(3)]
        assert dataset_dimensions(graphs, "graph-regression")[1] == 3
        with pytest.raises(DatasetError, match="one width"):
            dataset_dimensions([labelled(3), labelled(2)], "graph-regression")

    def test_task_label_mismatches(self):
        graphs = generate_lri_task(4, 5, 3, seed=0)
        with pytest.raises(DatasetError, match="float vectors"):
            dataset_dimensions(graphs, "graph-regression")
        with pytest.raises(DatasetError, match="pair labels"):
            dataset_dimensions(graphs, "pair-contact")


class TestTrainLoop:
    def test_metrics_csv_has_one_block_per_epoch(self, tmp_path):
        cfg = lri_config(tmp_path, epochs=1)
        _, checkpoint_path = train(cfg)
        with open(tmp_path / "run" / "metrics.csv", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "split", "metric", "value"]
        body = rows[1:]
        assert {r[0] for r in body} == {"0"}
        assert [r[2] for r in body] == ["loss", "accuracy"]
        assert checkpoint_path.exists()

    def test_two_runs_write_byte_identical_artifacts(self, tmp_path):
        cfg_a = lri_config(tmp_path, name="a", augment="neural-atoms")
        cfg_b = lri_config(tmp_path, name="b", augment="neural-atoms")
        train(cfg_a)
        train(cfg_b)
        metrics_a = (tmp_path / "a" / "metrics.csv").read_bytes()
        metrics_b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert metrics_a == metrics_b
        ckpt_a = json.loads((tmp_path / "a" / "checkpoint.json").read_text())
        ckpt_b = json.loads((tmp_path / "b" / "checkpoint.json").read_text())
        ckpt_a["config"]["out"] = ckpt_b["config"]["out"]
        assert ckpt_a == ckpt_b

    def test_loss_drops_on_learnable_task(self, tmp_path):
        cfg = lri_config(tmp_path, augment="neural-atoms", epochs=6,
                         layers=1, lr=0.02)
        model, _ = train(cfg)
        _, record = load_checkpoint(tmp_path / "run" / "checkpoint.json")
        losses = [row[3] for row in record["history"] if row[2] == "loss"]
        assert losses[5] < losses[0]

    def test_exploding_loss_aborts_with_context(self, tmp_path):
        # one Adam step moves weights by about lr, so squaring them across
        # two layers overflows f64 and the loss turns non-finite
        cfg = lri_config(tmp_path, lr=1e160, epochs=3)
        with pytest.raises(TrainingError, match="epoch"):
            with np.errstate(over="ignore", invalid="ignore"):
                train(cfg)


class TestCheckpoint:
    def test_round_trip_restores_exact_parameters_and_metrics(self, tmp_path):
        cfg = lri_config(tmp_path, augment="neural-atoms")
        model, path = train(cfg)
        graphs = generate_lri_task(12, 6, 3, seed=9)
        before = evaluate(model, graphs)
        loaded, record = load_checkpoint(path)
        for (name_a, ta), (name_b, tb) in zip(model.parameters(),
                                              loaded.parameters()):
            assert name_a == name_b
            assert np.array_equal(ta.data, tb.data), name_a
        assert evaluate(loaded, graphs) == before
        assert record["epoch"] == cfg.epochs

    def test_missing_and_unknown_parameters_are_rejected(self, tmp_path):
        cfg = lri_config(tmp_path)
        model, path = train(cfg)
        record = json.loads(path.read_text())

        broken = dict(record, params={k: v for k, v in record["params"].items()
                                      if k != "head.weight"})
        bad_path = tmp_path / "broken.json"
        bad_path.write_text(json.dumps(broken))
        with pytest.raises(TrainingError, match="head.weight"):
            load_checkpoint(bad_path)

        entry = record["params"]["head.weight"]
        wrong = dict(record, params=dict(
            record["params"],
            **{"head.weight": {"shape": [1, 1], "data": [0.0]}}))
        bad_path.write_text(json.dumps(wrong))
        with pytest.raises(TrainingError, match="shape"):
            load_checkpoint(bad_path)

        extra = dict(record, params=dict(record["params"],
                                         **{"layer9.mystery": entry}))
        bad_path.write_text(json.dumps(extra))
        with pytest.raises(TrainingError, match="unknown parameters"):
            load_checkpoint(bad_path)

    def test_save_handles_fractions_exactly(self, tmp_path):
        cfg = lri_config(tmp_path)
        model, _ = train(cfg)
        # overwrite one parameter with awkward values and round-trip it
        target = model.head["weight"]
        awkward = np.array([0.1, 1e-300, np.pi, -2.0 ** -52, 1e300, 3.0])
        target.data[...] = np.resize(awkward, target.data.size).reshape(target.shape)
        path = tmp_path / "exact.json"
        save_checkpoint(model, 2, [], path)
        loaded, _ = load_checkpoint(path)
        assert np.array_equal(dict(loaded.parameters())["head.weight"].data,
                              target.data)


class TestEvaluate:
    def test_feature_mismatch_is_an_error(self, tmp_path):
        cfg = lri_config(tmp_path)
        model, _ = train(cfg)
        rng = np.random.default_rng(2)
        other = [MolecularGraph(num_nodes=3, edges=[(0, 1)],
                                node_features=rng.normal(size=(3, 9)),
                                graph_label=0)]
        with pytest.raises(ConfigError, match="features"):
            evaluate(model, other)

    def test_constant_predictor_mae_is_mean_absolute_deviation(self):
        rng = np.random.default_rng(8)
        targets = rng.normal(size=(10, 2))
        graphs = [MolecularGraph(num_nodes=4, edges=[(0, 1), (1, 2), (2, 3)],
                                 node_features=rng.normal(size=(4, 3)),
                                 graph_label=y) for y in targets]
        cfg = TrainConfig(dataset="unused", out="unused",
                          task="graph-regression", layers=1, hidden=4, heads=2)
        model = GraphPropertyModel(cfg, feature_dim=3, out_dim=2, avg_nodes=4.0)
        model.head["weight"].data[...] = 0.0
        model.head["bias"].data[...] = targets.mean(axis=0)
        mae = evaluate(model, graphs)["mae"]
        assert mae == np.abs(targets - targets.mean(axis=0)).mean()

    def test_pair_contact_reports_mrr(self, tmp_path):
        rng = np.random.default_rng(4)
        graphs = [pair_graph(rng) for _ in range(6)]
        data = tmp_path / "pairs.jsonl"
        save_dataset(graphs, data)
        cfg = TrainConfig(dataset=str(data), out=str(tmp_path / "pc"),
                          task="pair-contact", layers=1, hidden=8, heads=2,
                          epochs=1, lr=0.01, batch=4, seed=0)
        model, _ = train(cfg)
        metrics = evaluate(model, graphs)
        assert set(metrics) == {"loss", "mrr"}
        assert 0.0 < metrics["mrr"] <= 1.0


class TestMeanReciprocalRank:
    def test_hand_summed_example(self):
        assert abs(mean_reciprocal_rank([1, 2, 4]) - (1 + 0.5 + 0.25) / 3) < 1e-12

    def test_all_first_is_exactly_one(self):
        assert mean_reciprocal_rank([1, 1, 1]) == 1.0

    def test_rejects_bad_ranks(self):
        with pytest.raises(ValueError):
            mean_reciprocal_rank([])
        with pytest.raises(ValueError):
            mean_reciprocal_rank([1, 0])

    def test_rank_counts_strictly_better_negatives(self):
        rng = np.random.default_rng(0)
        graph = MolecularGraph(
            num_nodes=4, edges=[(0, 1), (1, 2), (2, 3)],
            node_features=rng.normal(size=(4, 2)),
            pair_labels=[(0, 3, 1), (0, 1, 0), (1, 2, 0), (0, 2, 0)])
        batch = batch_graphs([graph])
        # positive scores 2.0; negatives 3.0, 2.0, 1.0 -> one strictly better
        ranks = _contact_reciprocal_ranks(batch, np.array([2.0, 3.0, 2.0, 1.0]))
        assert ranks == [0.5]
