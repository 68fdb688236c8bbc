import math
import struct

import numpy as np
import pytest

from pmoe.backbone import BackboneConfig
from pmoe.harness.config import ConfigError, parse_experiment
from pmoe.harness.data import (
    DataFormatError,
    GenerationError,
    SyntheticTaskSpec,
    expert_from_seed,
    generate_synthetic,
    load_idx_images,
    load_task,
    save_task,
    write_idx,
)
from pmoe.harness.train import AdamWState, TrainConfig, TrainingError, adamw_step, train
from pmoe.model import ModelConfig, build_model, trainable_parameters
from pmoe.numerics import Rng, Tensor

SMALL = BackboneConfig(image_h=16, image_w=16, patch_size=8, embed_dim=16, num_layers=2)


def scalar(v):
    return Tensor(np.array([v]), requires_grad=True)


class TestAdamW:
    def test_zero_grad_no_decay_is_identity(self):
        p = scalar(1.5)
        st = AdamWState()
        for _ in range(5):
            adamw_step([p], [np.zeros(1)], st, TrainConfig(weight_decay=0.0))
        assert p.data[0] == 1.5

    def test_zero_grad_decay_scales(self):
        p = scalar(2.0)
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.5)
        st = AdamWState()
        for _ in range(3):
            adamw_step([p], [np.zeros(1)], st, cfg)
        assert np.isclose(p.data[0], 2.0 * (1 - 0.05) ** 3, rtol=0, atol=1e-15)

    def test_three_steps_hand_unrolled(self):
        lr, wd, b1, b2, eps, g = 0.01, 0.1, 0.9, 0.999, 1e-8, 0.7
        p = scalar(1.0)
        st = AdamWState()
        cfg = TrainConfig(learning_rate=lr, weight_decay=wd, beta1=b1, beta2=b2, eps=eps)
        for _ in range(3):
            adamw_step([p], [np.array([g])], st, cfg)
        # constant gradient: m_t and v_t have closed forms, bias corrections cancel to g and g^2
        x = 1.0
        for t in (1, 2, 3):
            m = (1 - b1**t) * g
            v = (1 - b2**t) * g * g
            x = x * (1 - lr * wd) - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert np.isclose(p.data[0], x, rtol=0, atol=1e-15)
        assert st.step == 3

    def test_non_finite_gradient(self):
        p = scalar(0.0)
        st = AdamWState(step=4)
        with pytest.raises(TrainingError) as e:
            adamw_step([p], [np.array([np.nan])], st, TrainConfig())
        assert e.value.step == 5

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=-1)


@pytest.fixture(scope="module")
def plain_task():
    return generate_synthetic(SyntheticTaskSpec(seed=3, samples_per_class=4, test_per_class=2, backbone=SMALL))


def small_model(seed=0, mode="pmoe"):
    experts = [expert_from_seed(SMALL, 5), expert_from_seed(SMALL, 6)]
    return build_model(ModelConfig(backbone=SMALL, num_prompts=2, mode=mode), experts, Rng(seed))


class TestTrain:
    def test_zero_epochs(self, plain_task):
        m = small_model()
        before = [t.data.copy() for t in trainable_parameters(m)]
        rep = train(m, plain_task.train, TrainConfig(epochs=0), plain_task.test)
        assert len(rep.epochs) == 1 and rep.steps == 0
        assert all(np.array_equal(a, t.data) for a, t in zip(before, trainable_parameters(m)))

    def test_deterministic_and_csv(self, plain_task, tmp_path):
        reps = []
        for _ in range(2):
            m = small_model()
            reps.append(train(m, plain_task.train, TrainConfig(epochs=2, batch_size=5, learning_rate=1e-2), plain_task.test))
        assert reps[0] == reps[1]
        assert reps[0].steps == 2 * math.ceil(16 / 5)
        for e in reps[0].epochs:
            assert 0 <= e.train_acc <= 1 and 0 <= e.eval_acc <= 1
        reps[0].to_csv(tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,train_acc,eval_acc" and len(lines) == 1 + 3
        assert sorted(reps[0].trace_histogram) == [0, 1]
        assert sum(reps[0].trace_histogram[0]) == 8 * 2 * 2

    def test_loss_decreases(self, plain_task):
        m = small_model()
        rep = train(m, plain_task.train, TrainConfig(epochs=5, batch_size=8, learning_rate=1e-2))
        assert rep.final.train_loss < rep.epochs[0].train_loss

    def test_max_steps(self, plain_task):
        rep = train(small_model(), plain_task.train, TrainConfig(epochs=10, batch_size=4, max_steps=3))
        assert rep.steps == 3

    def test_backbone_untouched(self, plain_task):
        m = small_model()
        frozen = [t.data.copy() for t in m.frozen_tensors()]
        train(m, plain_task.train, TrainConfig(epochs=1, batch_size=4, learning_rate=1e-1))
        assert all(np.array_equal(a, t.data) for a, t in zip(frozen, m.frozen_tensors()))

    def test_no_dispatch_mode_trains(self, plain_task):
        rep = train(small_model(mode="epts_no_dispatch"), plain_task.train, TrainConfig(epochs=1, batch_size=8))
        assert rep.trace_histogram == {}


class TestData:
    def test_plain_counts_and_determinism(self):
        spec = SyntheticTaskSpec(seed=1, num_classes=3, samples_per_class=5, test_per_class=2, backbone=SMALL)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        assert np.bincount(a.train.labels).tolist() == [5, 5, 5]
        assert np.bincount(a.test.labels).tolist() == [2, 2, 2]
        assert a.train.images.shape == (15, 16, 16, 1)
        assert np.array_equal(a.train.images, b.train.images)
        assert not any(np.array_equal(x, y) for x in a.train.images for y in a.test.images)

    def test_complementary_certificate(self):
        spec = SyntheticTaskSpec(seed=0, kind="complementary", samples_per_class=32, test_per_class=32)
        data = generate_synthetic(spec)
        assert np.bincount(data.train.labels).tolist() == [32] * 4
        assert float(data.meta["probe_concat"]) >= 0.95
        assert float(data.meta["probe_a"]) <= 0.70 and float(data.meta["probe_b"]) <= 0.70

    def test_certificate_failure_raises(self):
        # an unreachable concat threshold makes every attempt fail
        spec = SyntheticTaskSpec(seed=0, kind="complementary", samples_per_class=8, test_per_class=8, probe_min=1.01, max_attempts=2)
        with pytest.raises(GenerationError):
            generate_synthetic(spec)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SyntheticTaskSpec(kind="complementary", num_classes=3)
        with pytest.raises(ValueError):
            SyntheticTaskSpec(kind="other")
        assert SyntheticTaskSpec(kind="complementary").noise == 2.0
        assert SyntheticTaskSpec().noise == 1.0

    def test_task_archive_round_trip(self, tmp_path, plain_task):
        save_task(tmp_path / "t.pmwa", plain_task)
        back = load_task(tmp_path / "t.pmwa")
        assert np.array_equal(back.train.images, plain_task.train.images)
        assert np.array_equal(back.test.labels, plain_task.test.labels)
        assert back.meta == plain_task.meta


class TestIdx:
    def hand_pair(self, tmp_path):
        img = struct.pack(">IIII", 0x803, 2, 2, 3) + bytes([0, 255, 51, 102, 153, 204, 1, 2, 3, 4, 5, 6])
        lab = struct.pack(">II", 0x801, 2) + bytes([7, 1])
        (tmp_path / "i").write_bytes(img)
        (tmp_path / "l").write_bytes(lab)
        return tmp_path / "i", tmp_path / "l"

    def test_hand_built_fixture(self, tmp_path):
        ds = load_idx_images(*self.hand_pair(tmp_path))
        assert ds.images.shape == (2, 2, 3, 1)
        assert ds.images[0, :, :, 0].tolist() == [[0.0, 1.0, 0.2], [0.4, 0.6, 0.8]]
        assert ds.images[1, 1, 2, 0] == 6 / 255
        assert ds.labels.tolist() == [7, 1]

    def test_writer_round_trip(self, tmp_path):
        imgs = Rng(0).integers(0, 256, (3, 4, 5)).astype(np.uint8)
        write_idx(tmp_path / "i", tmp_path / "l", imgs, [0, 1, 2])
        ds = load_idx_images(tmp_path / "i", tmp_path / "l")
        assert np.array_equal(np.rint(ds.images[..., 0] * 255), imgs)

    def test_count_mismatch(self, tmp_path):
        i, _ = self.hand_pair(tmp_path)
        (tmp_path / "l3").write_bytes(struct.pack(">II", 0x801, 3) + bytes(3))
        with pytest.raises(DataFormatError):
            load_idx_images(i, tmp_path / "l3")

    def test_empty_and_bad_magic_and_truncated(self, tmp_path):
        i, l = self.hand_pair(tmp_path)
        (tmp_path / "empty").write_bytes(b"")
        for bad in (tmp_path / "empty",):
            with pytest.raises(DataFormatError):
                load_idx_images(bad, l)
        (tmp_path / "magic").write_bytes(struct.pack(">II", 0x801, 2) + bytes(2))
        with pytest.raises(DataFormatError):
            load_idx_images(tmp_path / "magic", l)
        (tmp_path / "short").write_bytes(i.read_bytes()[:-1])
        with pytest.raises(DataFormatError):
            load_idx_images(tmp_path / "short", l)


class TestConfig:
    def test_parse_all_sections(self):
        exp = parse_experiment(
            "num_experts = 2\nnum_prompts = 3\nprompted_layers = 0, 2\nembed_dim = 16\nnum_layers = 3\n"
            "learning_rate = 0.01\nadam_eps = 1e-7\nepochs = 2\nexpert_seeds = 4, 9\ndata_kind = complementary\n",
            environ={},
        )
        assert exp.model.num_prompts == 3 and exp.model.prompted_layers == (0, 2)
        assert exp.model.backbone.embed_dim == 16 and exp.model.backbone.num_layers == 3
        assert exp.train.learning_rate == 0.01 and exp.train.eps == 1e-7 and exp.train.epochs == 2
        assert exp.expert_seeds == [4, 9] and exp.extra == {"data_kind": "complementary"}

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="unknown config key: colour"):
            parse_experiment("colour = blue\n", environ={})

    def test_seed_env_override(self):
        exp = parse_experiment("seed = 3\n", environ={"PMOE_SEED": "11"})
        assert exp.train.seed == 11 and exp.expert_seeds == [11001, 11002]

    def test_num_prompt_layers(self):
        assert parse_experiment("num_prompt_layers = 2\n", environ={}).model.prompted_layers == (0, 1)

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            parse_experiment("epochs = many\n", environ={})
        with pytest.raises(ConfigError):
            parse_experiment("expert_seeds = 1\n", environ={})
