from collections import Counter

import numpy as np
import numpy.testing as npt
import pytest

from docshadow import tensor as T
from docshadow.checkpoint import load_checkpoint
from docshadow.datagen import make_triplet, synth_document
from docshadow.errors import ConfigError
from docshadow.metrics import l1_loss
from docshadow.models import desk_config, init_params, lp_ioanet_forward
from docshadow.training import (
    PAPER_COMPOSITION, TrainConfig, TrainingDiverged, cosine_lr, desk_profile, mixed_batch, params_digest,
    stack_batch, steps_per_epoch, train_stage1, train_stage2,
)

TINY = desk_config((8, 8))


def _data(n=4, size=32, seed=0):
    return {"SYNTH": [make_triplet(synth_document(size, size, seed * 100 + i), seed * 100 + i)[0] for i in range(n)]}


def _cfg(stage=1, **kw):
    base = dict(model=TINY, max_steps=6, composition={"SYNTH": 2})
    base.update(kw)
    return desk_profile(stage, **base)


@pytest.fixture(scope="module")
def data():
    return _data()


@pytest.fixture(scope="module")
def stage1_ckpt(tmp_path_factory, data):
    out = tmp_path_factory.mktemp("s1")
    return train_stage1(_cfg(out_dir=str(out)), data).checkpoint


class TestSampler:
    def test_exact_composition(self):
        datasets = {tag: list(range(40)) for tag in PAPER_COMPOSITION}
        datasets["AOSR"] = list(range(5))
        for step in range(50):
            _, tags, idx = mixed_batch(datasets, PAPER_COMPOSITION, seed=1, step=step)
            assert Counter(tags) == Counter(PAPER_COMPOSITION)
            # without replacement inside a tag when the dataset is big enough
            assert len(set(idx[:15])) == 15

    def test_deterministic(self):
        datasets = {"A": list(range(9)), "B": list(range(3))}
        comp = {"A": 3, "B": 1}
        assert mixed_batch(datasets, comp, 2, 5)[2] == mixed_batch(datasets, comp, 2, 5)[2]
        assert mixed_batch(datasets, comp, 2, 5)[2] != mixed_batch(datasets, comp, 2, 6)[2]

    def test_missing_tag(self):
        with pytest.raises(ConfigError):
            mixed_batch({"A": [1]}, {"A": 1, "B": 1}, 0, 0)

    def test_resizes_to_operating_resolution(self, data):
        batch, _, _ = mixed_batch(data, {"SYNTH": 2}, 0, 0, size=(8, 8))
        x, y = stack_batch(batch)
        assert x.shape == y.shape == (2, 3, 8, 8)
        assert set(np.unique(batch[0].mask)) <= {0, 1}

    def test_steps_per_epoch(self):
        assert steps_per_epoch({"A": range(45), "B": range(4)}, {"A": 15, "B": 2}) == 3
        assert steps_per_epoch({"A": range(46)}, {"A": 15}) == 4


class TestSchedule:
    def test_cosine_endpoints(self):
        assert cosine_lr(0, 100, 1e-3, 1e-5) == pytest.approx(1e-3)
        assert cosine_lr(99, 100, 1e-3, 1e-5) == pytest.approx(1e-5)
        assert cosine_lr(50, 101, 1.0, 0.0) == pytest.approx(0.5)

    def test_monotone(self):
        lrs = [cosine_lr(s, 50, 1e-3, 1e-4) for s in range(50)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            TrainConfig(stage=3)
        with pytest.raises(ConfigError):
            TrainConfig(stage=2)
        with pytest.raises(ConfigError):
            TrainConfig(lr=-1.0)
        with pytest.raises(ConfigError):
            TrainConfig(composition={"A": 0})

    def test_default_epochs(self):
        assert TrainConfig().epochs == 1000
        assert TrainConfig(stage=2, init_from="x").epochs == 200
        w = TrainConfig().loss_weights
        assert (w.l1, w.perceptual) == (10.0, 5.0)


class TestStage1:
    def test_loss_decreases(self, data):
        res = train_stage1(_cfg(max_steps=30), data)
        first = np.mean([r["loss_total"] for r in res.log[:5]])
        last = np.mean([r["loss_total"] for r in res.log[-5:]])
        assert last < first

    def test_zero_lr_keeps_params(self, data):
        params = init_params(TINY, 0)
        before = params_digest(params)
        train_stage1(_cfg(lr=0.0, lr_min=0.0), data, params=params)
        assert params_digest(params) == before

    def test_only_ioanet_trained(self, data):
        params = init_params(TINY, 0)
        before = params_digest(params, "refiner.") + params_digest(params, "masknet.")
        train_stage1(_cfg(), data, params=params)
        assert params_digest(params, "refiner.") + params_digest(params, "masknet.") == before

    def test_resume_matches_uninterrupted(self, tmp_path, data):
        full = train_stage1(_cfg(out_dir=str(tmp_path / "full")), data)
        train_stage1(_cfg(out_dir=str(tmp_path / "part"), checkpoint_every=3), data)
        params, adam = load_checkpoint(tmp_path / "part" / "stage1_step3.ckpt", TINY)
        resumed = train_stage1(_cfg(out_dir=str(tmp_path / "resumed")), data, params=params, adam=adam)
        assert len(resumed.log) == 3
        assert full.checkpoint.read_bytes() == resumed.checkpoint.read_bytes()

    def test_writes_log(self, tmp_path, data):
        train_stage1(_cfg(out_dir=str(tmp_path)), data)
        lines = (tmp_path / "stage1_log.csv").read_text().splitlines()
        assert lines[0] == "step,epoch,loss_total,loss_l1,loss_perc" and len(lines) == 7

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_divergence_names_step(self, data):
        with pytest.raises(TrainingDiverged, match="step 1"):
            train_stage1(_cfg(lr=1e30, lr_min=1e30, max_steps=3), data)


class TestStage2:
    def test_ioanet_frozen(self, stage1_ckpt, data, tmp_path):
        params, _ = load_checkpoint(stage1_ckpt, TINY)
        before = params_digest(params, "ioanet.")
        res = train_stage2(_cfg(2, init_from=str(stage1_ckpt), out_dir=str(tmp_path)), data)
        after, _ = load_checkpoint(res.checkpoint, TINY)
        assert params_digest(after, "ioanet.") == before
        assert params_digest(after, "refiner.") != params_digest(params, "refiner.")

    def test_initial_loss_is_plain_l1(self, stage1_ckpt, data):
        cfg = _cfg(2, init_from=str(stage1_ckpt))
        params, _ = load_checkpoint(stage1_ckpt, TINY)
        batch, _, _ = mixed_batch(data, cfg.composition, cfg.seed, 0, cfg.resolution)
        x, y = stack_batch(batch)
        with T.no_grad():
            expected = l1_loss(lp_ioanet_forward(x, params, TINY, training=True), y).item()
        res = train_stage2(cfg, data)
        assert res.log[0]["loss_total"] == pytest.approx(expected, rel=1e-6)

    def test_zero_lr_keeps_upsampler(self, stage1_ckpt, data):
        params, _ = load_checkpoint(stage1_ckpt, TINY)
        before = params_digest(params)
        train_stage2(_cfg(2, init_from=str(stage1_ckpt), lr=0.0, lr_min=0.0), data, params=params)
        assert params_digest(params) == before

    def test_high_resolution_batches(self, stage1_ckpt):
        assert _cfg(2, init_from=str(stage1_ckpt)).resolution == (32, 32)


class TestDeterminism:
    def test_two_runs_identical(self, tmp_path, data):
        ckpts = []
        for run in ("a", "b"):
            s1 = train_stage1(_cfg(out_dir=str(tmp_path / run)), data)
            s2 = train_stage2(_cfg(2, init_from=str(s1.checkpoint), out_dir=str(tmp_path / run)), data)
            ckpts.append(s2.checkpoint.read_bytes())
        assert ckpts[0] == ckpts[1]
