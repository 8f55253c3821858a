import numpy as np
import pytest

from aff.config import default_config, dumps, from_dict, load, loads, replace_section, to_dict
from aff.errors import ConfigError
from aff.experiments import DESK_TRAIN, aggregate, desk_config, run_study, worker_count


def test_defaults_round_trip_through_toml():
    cfg = default_config()
    assert loads(dumps(cfg)) == cfg
    changed = replace_section(cfg, "train", lr=0.5, mode="coupled")
    assert loads(dumps(changed)) == changed


def test_defaults_carry_the_reference_training_values():
    t = default_config().train
    assert (t.margin, t.scale, t.momentum, t.weight_decay, t.lr, t.epochs) == (0.3, 32.0, 0.99, 0.01, 0.001, 20)
    m = default_config().model
    assert (m.dim, m.hidden, m.depth, m.heads, m.share_weights) == (32, 64, 4, 4, True)


def test_partial_document_keeps_other_defaults():
    cfg = loads("[train]\nepochs = 3\n[data]\nseed = 9\n")
    assert cfg.train.epochs == 3 and cfg.data.seed == 9
    assert cfg.model == default_config().model


def test_families_as_array_of_tables():
    cfg = loads('[[data.families]]\nkind = "global"\ndim = 12\ninformative = 6\nsigma = 0.5\n')
    assert len(cfg.data.families) == 1 and cfg.data.families[0].dim == 12


@pytest.mark.parametrize("text", [
    "[train]\nlearning_rate = 0.1\n",
    "[nonsense]\nx = 1\n",
    "[train]\nepochs = 'many'\n",
    "[train]\nepochs = 2.5\n",
    "[model]\nshare_weights = 1\n",
    "[data]\nfamilies = []\n",
    '[[data.families]]\nkind = "global"\ndim = 8\ncolor = 1\n',
    "[eval]\ntop_k = -1\n",
    "[train\n",
])
def test_invalid_documents_rejected(text):
    with pytest.raises(ConfigError):
        loads(text)


def test_integer_accepted_for_float_keys():
    assert loads("[train]\nlr = 1\n").train.lr == 1


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load(tmp_path / "none.toml")


def test_to_dict_is_plain_data():
    doc = to_dict(default_config())
    assert isinstance(doc["data"]["families"], list) and isinstance(doc["data"]["split"], list)
    assert from_dict(doc) == default_config()


def test_desk_preset_only_touches_the_schedule():
    desk = desk_config()
    for k, v in DESK_TRAIN.items():
        assert getattr(desk.train, k) == v
    assert desk.data == default_config().data and desk.model == default_config().model


def test_aggregate_mean_and_sample_std():
    per_seed = [[("a", {"m": 1.0})], [("a", {"m": 2.0})], [("a", {"m": 4.0})]]
    (name, cells), = aggregate(per_seed)
    mean, std, values = cells["m"]
    assert name == "a" and mean == pytest.approx(7 / 3) and values == [1.0, 2.0, 4.0]
    assert std == pytest.approx(np.std([1.0, 2.0, 4.0], ddof=1))


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("AFF_THREADS", "1")
    assert worker_count(5) == 1
    monkeypatch.setenv("AFF_THREADS", "3")
    assert worker_count(2) == 2
    monkeypatch.setenv("AFF_THREADS", "zero")
    with pytest.raises(ConfigError):
        worker_count(2)


def test_study_errors():
    with pytest.raises(ConfigError):
        run_study("nope")
    with pytest.raises(ConfigError):
        run_study("momentum", seeds=0)


@pytest.mark.parametrize("study,rows", [
    ("mixer-variants", ["ensemble", "mlp", "transformer", "transformer-unshared"]),
    ("train-mode", ["two-stage", "joint"]),
    ("decoupling", ["coupled", "decoupled"]),
    ("noise", ["default/ensemble", "default/mixer", "weak/ensemble", "weak/mixer",
               "noise/ensemble", "noise/mixer", "weak+noise/ensemble", "weak+noise/mixer"]),
])
def test_study_row_structure(study, rows, monkeypatch):
    monkeypatch.setenv("AFF_THREADS", "1")
    cfg = replace_section(default_config(), "train", epochs=1)
    out = run_study(study, 1, cfg)
    assert [r for r, _ in out] == rows


def test_feature_combo_rows(monkeypatch):
    monkeypatch.setenv("AFF_THREADS", "1")
    cfg = replace_section(default_config(), "train", epochs=1)
    rows = [r for r, _ in run_study("feature-combos", 1, cfg)]
    assert rows == ["g0", "g1", "g2", "l0", "g0+g1", "g0+g1+g2", "g0+g1+g2+l0"]
