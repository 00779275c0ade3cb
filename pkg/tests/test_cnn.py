import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardamage.cnn import (CaeConfig, PaperCnnConfig, accuracy, assemble_and_finetune, build_paper_cnn,
                           cae_pretrain, cae_pretrain_stage, conv_layer_index, paper_cnn_param_count,
                           train_cnn)
from cardamage.data import AugmentSpec, augment_to_counts
from cardamage.nn import Conv, Dense, MaxPool, TrainConfig
from cardamage.synth import as_arrays, synth_dataset, synth_unlabeled


def registry_count(net):
    return sum(p.size for _, _, p in net.parameters())


# --- topology -----------------------------------------------------------------

@pytest.mark.parametrize("shape,k,expected", [
    ((224, 224, 3), 8, 423_032),
    ((32, 32, 3), 8, 29_816),
    ((224, 224, 3), 2, 422_258),
])
def test_param_counts(shape, k, expected):
    net = build_paper_cnn(PaperCnnConfig(shape, num_classes=k))
    assert net.num_params() == expected == registry_count(net)


def test_param_breakdown_224():
    net = build_paper_cnn(PaperCnnConfig((224, 224, 3)))
    convs = sum(l.num_params() for l in net.layers if isinstance(l, Conv))
    dense = [l.num_params() for l in net.layers if isinstance(l, Dense)]
    assert (convs, dense) == (20_464, [401_536, 1_032])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(2, 10))
def test_param_count_formula(hm, wm, c, k):
    h, w = 16 * hm, 16 * wm
    net = build_paper_cnn(PaperCnnConfig((h, w, c), num_classes=k))
    assert registry_count(net) == paper_cnn_param_count(h, w, c, k)


def test_topology_order():
    net = build_paper_cnn(PaperCnnConfig((32, 32, 3)))
    kinds = [l.kind for l in net.layers]
    assert kinds == ["conv", "relu", "maxpool", "dropout"] * 4 + ["fc", "relu", "dropout", "fc", "softmax"]
    assert all(net.layers[conv_layer_index(s)].kind == "conv" for s in range(4))
    assert net.shapes[-1] == (8,)
    assert net.shapes[16] == (2, 2, 16)


def test_input_not_divisible_by_16():
    with pytest.raises(ValueError, match="divisible"):
        PaperCnnConfig((40, 32, 3))


# --- training ---------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_corpus():
    return as_arrays(synth_dataset(6, 32, seed=21))


def test_zero_epochs_unchanged(tiny_corpus):
    x, y = tiny_corpus
    net = build_paper_cnn(PaperCnnConfig((32, 32, 3)), seed=2)
    before = [p.copy() for _, _, p in net.parameters()]
    net2, history = train_cnn(net, x, y, TrainConfig(epochs=0))
    assert history == [] and net2 is net
    assert all(np.array_equal(b, p) for b, (_, _, p) in zip(before, net.parameters()))


def test_train_errors(tiny_corpus):
    x, y = tiny_corpus
    net = build_paper_cnn(PaperCnnConfig((32, 32, 3)))
    with pytest.raises(ValueError, match="empty"):
        train_cnn(net, x[:0], y[:0], TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train_cnn(net, x, np.full(len(y), 8), TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train_cnn(build_paper_cnn(PaperCnnConfig((32, 32, 3), num_classes=4)), x, y, TrainConfig(epochs=1))


def test_history_per_epoch_and_deterministic(tiny_corpus):
    x, y = tiny_corpus
    cfg = TrainConfig(epochs=2, batch_size=16, seed=4)
    a, ha = train_cnn(build_paper_cnn(PaperCnnConfig((32, 32, 3)), seed=1), x, y, cfg, x, y)
    b, hb = train_cnn(build_paper_cnn(PaperCnnConfig((32, 32, 3)), seed=1), x, y, cfg, x, y)
    assert [h["epoch"] for h in ha] == [1, 2]
    assert set(ha[0]) == {"epoch", "loss", "accuracy", "val_accuracy"}
    assert ha == hb
    for (_, _, p), (_, _, q) in zip(a.parameters(), b.parameters()):
        assert p.tobytes() == q.tobytes()


@pytest.mark.slow
def test_augmented_training_not_worse_than_plain():
    items = synth_dataset(60, 32, seed=31)
    x, y = as_arrays(items)
    xt, yt = as_arrays(synth_dataset(25, 32, seed=32))
    spec = AugmentSpec(target_counts=(120,) * 8, seed=5)
    aug = augment_to_counts([it.image for it in items], spec)
    xa = np.stack([im.pixels for im in aug])
    ya = np.array([im.label for im in aug])
    cfg = TrainConfig(epochs=20)
    plain, _ = train_cnn(build_paper_cnn(PaperCnnConfig((32, 32, 3)), seed=0), x, y, cfg)
    augmented, _ = train_cnn(build_paper_cnn(PaperCnnConfig((32, 32, 3)), seed=0), xa, ya, cfg)
    assert accuracy(augmented, xt, yt) >= accuracy(plain, xt, yt) - 0.02


# --- CAE --------------------------------------------------------------------

def test_cae_config_requires_smaller_finetune_lr():
    with pytest.raises(ValueError, match="finetune_lr"):
        CaeConfig(pretrain_lr=0.01, finetune_lr=0.01)
    with pytest.raises(ValueError):
        CaeConfig(stages=5)
    with pytest.raises(ValueError):
        CaeConfig(dropout=1.0)


def test_cae_zero_images_zero_mse():
    st0 = cae_pretrain_stage(0, np.zeros((4, 16, 16, 3)), CaeConfig(epochs=2, stages=1))
    assert st0.mse_init == 0.0 and st0.mse_final == 0.0
    assert np.all(st0.b == 0.0)


def test_cae_constant_corpus_learns():
    x = np.full((24, 16, 16, 3), 0.6)
    st0 = cae_pretrain_stage(0, x, CaeConfig(epochs=20, stages=1, batch_size=8))
    assert st0.mse_final < 1e-3
    assert st0.mse_final < st0.mse_init


def test_cae_stage_out_of_order():
    x = np.zeros((2, 16, 16, 3))
    with pytest.raises(ValueError, match="out of order"):
        cae_pretrain_stage(1, x, CaeConfig(epochs=1))


@pytest.fixture(scope="module")
def unlabeled():
    return synth_unlabeled(60, 32, seed=8)


def test_cae_halves_mse_and_leaves_earlier_stages(unlabeled):
    cfg = CaeConfig(epochs=3)
    s0 = cae_pretrain_stage(0, unlabeled, cfg)
    w0, b0 = s0.W.copy(), s0.b.copy()
    s1 = cae_pretrain_stage(1, unlabeled, cfg, [s0])
    assert s0.W.tobytes() == w0.tobytes() and s0.b.tobytes() == b0.tobytes()
    assert s0.mse_final <= 0.5 * s0.mse_init
    assert s1.W.shape == (5, 5, 16, 16)
    assert [h["epoch"] for h in s1.history] == [1, 2, 3]


def test_cae_deterministic(unlabeled):
    cfg = CaeConfig(epochs=1, stages=1, dropout=0.2)
    a = cae_pretrain(unlabeled[:16], cfg)[0]
    b = cae_pretrain(unlabeled[:16], cfg)[0]
    assert a.W.tobytes() == b.W.tobytes()


def test_assemble_and_finetune(unlabeled):
    cae = CaeConfig(epochs=1, batch_size=16)
    stages = cae_pretrain(unlabeled[:24], cae)
    x, y = as_arrays(synth_dataset(3, 32, seed=9))
    cnn = PaperCnnConfig((32, 32, 3))
    net, history = assemble_and_finetune(stages, x, y, cae, cnn, TrainConfig(epochs=1, lr=0.5))
    assert len(history) == 1
    for st_ in stages:
        w = net.layers[conv_layer_index(st_.index)].params["W"]
        assert w.shape == st_.W.shape and not np.array_equal(w, st_.W)
    with pytest.raises(ValueError, match="missing stage"):
        assemble_and_finetune(stages[:3], x, y, cae, cnn, TrainConfig(epochs=1))


def test_finetune_uses_finetune_lr(unlabeled):
    cae = CaeConfig(epochs=1, stages=4, pretrain_lr=0.05, finetune_lr=0.001, rescale=False)
    stages = cae_pretrain(unlabeled[:8], cae)
    x, y = as_arrays(synth_dataset(1, 32, seed=10))
    cnn = PaperCnnConfig((32, 32, 3), conv_dropout=0.0, fc_dropout=0.0)
    cfg = TrainConfig(epochs=1, lr=0.9, momentum=0.0, batch_size=len(x), shuffle=False)
    net, _ = assemble_and_finetune(stages, x, y, cae, cnn, cfg)
    # replay one full-batch step at the fine-tuning rate by hand
    ref = build_paper_cnn(cnn, seed=cfg.seed)
    for st_ in stages:
        ref.layers[conv_layer_index(st_.index)].params["W"][...] = st_.W
        ref.layers[conv_layer_index(st_.index)].params["b"][...] = st_.b
    grads = ref.backward(ref.forward(x, "train"), y)
    expected = ref.layers[16].params["W"] - 0.001 * grads[(16, "W")]
    np.testing.assert_allclose(net.layers[16].params["W"], expected, atol=1e-14)


def _stage_outputs(net, x):
    h, out = x, []
    for layer in net.layers[:16]:
        h = layer.forward(h)
        if isinstance(layer, MaxPool):
            out.append(h)
    return out


@pytest.mark.parametrize("stages_used", [2, 4])
def test_rescale_matches_random_init_scale_and_keeps_features(unlabeled, stages_used):
    x, y = as_arrays(synth_dataset(2, 32, seed=12))
    cnn = PaperCnnConfig((32, 32, 3))
    frozen = TrainConfig(epochs=0)
    cae = CaeConfig(epochs=1, stages=stages_used, seed=4)
    stages = cae_pretrain(unlabeled[:16], cae)
    scaled, _ = assemble_and_finetune(stages, x, y, cae, cnn, frozen)
    raw, _ = assemble_and_finetune(stages, x, y, dataclasses.replace(cae, rescale=False), cnn, frozen)
    rand = build_paper_cnn(cnn, seed=frozen.seed)
    got, base, want = _stage_outputs(scaled, x), _stage_outputs(raw, x), _stage_outputs(rand, x)
    for i in range(stages_used):
        rms = np.sqrt(np.mean(got[i] ** 2))
        assert rms == pytest.approx(np.sqrt(np.mean(want[i] ** 2)), rel=1e-12)
        # a single positive factor maps the unscaled features onto the rescaled ones
        ratio = np.sqrt(np.mean(got[i] ** 2) / np.mean(base[i] ** 2))
        np.testing.assert_allclose(got[i], ratio * base[i], rtol=1e-10, atol=1e-14)
    # stages that were not pretrained keep their random weights
    for i in range(stages_used, 4):
        idx = conv_layer_index(i)
        assert scaled.layers[idx].params["W"].tobytes() == rand.layers[idx].params["W"].tobytes()


def test_dataclass_replace_keeps_validation():
    with pytest.raises(ValueError):
        dataclasses.replace(CaeConfig(), finetune_lr=1.0)


def test_seeded_init_differs_by_seed():
    a = build_paper_cnn(PaperCnnConfig((32, 32, 3)), seed=1)
    b = build_paper_cnn(PaperCnnConfig((32, 32, 3)), seed=2)
    assert not np.array_equal(a.layers[0].params["W"], b.layers[0].params["W"])
    lim = np.sqrt(6 / (25 * 3 + 25 * 16))
    assert np.abs(a.layers[0].params["W"]).max() <= lim
