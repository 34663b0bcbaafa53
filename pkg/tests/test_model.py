import numpy as np
import pytest
import torch

from oracles import numeric_grad_check
from stok import model as M
from stok import mtm
from stok.augment import AugSpec
from stok.augment.pipeline import seit_baseline
from stok.codec import Codebook, PatchTokenizer, TokenSplit
from stok.errors import ConfigError, DataError, ShapeError
from stok.training import LineLog, TrainRecipe
from stok.toydata import make_shapes


def tiny(stem="conv4x4_overlap", **kw):
    base = dict(grid=(4, 4), in_dim=6, depth=1, width=16, heads=2, stem=stem, K=16, num_classes=3)
    base.update(kw)
    return M.BackboneConfig(**base)


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(0)
    codebook = Codebook(rng.normal(size=(16, 6)))
    labels = rng.integers(0, 3, 48)
    # class c draws its tokens from a disjoint band, so the task is learnable
    tokens = labels[:, None, None] * 5 + rng.integers(0, 5, (48, 4, 4))
    return codebook, TokenSplit(tokens[:32], labels[:32], None), TokenSplit(tokens[32:], labels[32:], None)


@pytest.mark.parametrize("kw", [dict(width=10, heads=3), dict(stem="conv3"), dict(grid=(5, 4))])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        tiny(**kw)


def test_config_dict_round_trip():
    cfg = tiny()
    assert M.BackboneConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        M.BackboneConfig.from_dict({**cfg.to_dict(), "colour": 1})


@pytest.mark.parametrize("stem", M.STEMS)
def test_backbone_shapes_and_determinism(stem):
    torch.manual_seed(0)
    net = M.Classifier(tiny(stem)).eval()
    Z = torch.randn(3, 4, 4, 6)
    feats = net.backbone(Z)
    assert feats.shape == (3, 1 + 4, 16)
    assert torch.equal(net(Z), net(Z))
    doubled = net(torch.cat([Z, Z]))
    torch.testing.assert_close(doubled[:3], doubled[3:], atol=0, rtol=0)
    torch.testing.assert_close(M.forward_backbone(Z, net), feats[:, 0])


def test_backbone_rejects_wrong_grid():
    net = M.Classifier(tiny())
    with pytest.raises(ShapeError):
        net(torch.zeros(1, 6, 6, 6))
    with pytest.raises(ShapeError):
        net(torch.zeros(1, 4, 4, 5))


def test_backbone_finite_on_large_inputs(rng):
    torch.manual_seed(0)
    net = M.Classifier(tiny()).eval()
    for scale in (1.0, 5.0, 10.0):
        Z = torch.from_numpy(rng.uniform(-scale, scale, (4, 4, 4, 6))).float()
        assert torch.isfinite(net(Z)).all()


def test_conv2x2_stem_is_per_unit_linear(rng):
    torch.manual_seed(0)
    stem = M.Stem("conv2x2", 3, 5)
    Z = torch.randn(1, 4, 4, 3)
    out = stem(Z)
    block = Z[0, 2:4, 0:2].reshape(-1)
    torch.testing.assert_close(out[0, 2], stem.proj(block))


def test_overlap_stem_output_grid():
    stem = M.Stem("conv4x4_overlap", 3, 5)
    assert stem(torch.randn(2, 8, 6, 3)).shape == (2, 4 * 3, 5)


@pytest.mark.parametrize("stem", M.STEMS)
def test_backbone_gradient_matches_finite_differences(stem, rng):
    torch.manual_seed(0)
    cfg = M.BackboneConfig(grid=(4, 4), in_dim=3, depth=1, width=8, heads=2, stem=stem,
                           K=4, num_classes=3)
    net = M.Classifier(cfg).double()
    Z = torch.from_numpy(rng.normal(size=(2, 4, 4, 3)))
    y = torch.tensor([0, 2])
    loss = lambda: torch.nn.functional.cross_entropy(net(Z), y)
    assert numeric_grad_check(loss, list(net.parameters()), max_entries=80) < 1e-4


def test_soft_cross_entropy_matches_hard_labels(rng):
    logits = torch.from_numpy(rng.normal(size=(5, 4)))
    y = torch.tensor([0, 1, 2, 3, 0])
    onehot = torch.nn.functional.one_hot(y, 4).double()
    torch.testing.assert_close(M.soft_cross_entropy(logits, onehot, 0.1),
                               torch.nn.functional.cross_entropy(logits, y, label_smoothing=0.1))


# ------------------------------------------------------------------ training

def test_training_learns_and_logs(data):
    codebook, train, val = data
    net, log = M.train_supervised(train, codebook, tiny(),
                                  TrainRecipe(epochs=40, batch_size=8, lr=3e-3, warmup_epochs=1),
                                  val=val)
    assert log.header == "epoch,split,metric,value"
    assert log.lines[0].startswith("0,train,loss,") and log.lines[1].startswith("0,val,top1,")
    table = torch.from_numpy(codebook.standardized())
    assert M.accuracy(net, train.tokens, train.labels, table) > 0.9


def test_training_is_reproducible(data):
    codebook, train, val = data
    recipe = TrainRecipe(epochs=2, batch_size=8)
    a, la = M.train_supervised(train, codebook, tiny(), recipe, seit_baseline(), val=val)
    b, lb = M.train_supervised(train, codebook, tiny(), recipe, seit_baseline(), val=val)
    assert la.text() == lb.text()
    for (k, v), (_, w) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(v, w), k


def test_zero_epochs_returns_init(data):
    codebook, train, _ = data
    torch.manual_seed(0)
    init = M.Classifier(tiny())
    net, log = M.train_supervised(train, codebook, tiny(), TrainRecipe(epochs=0))
    assert log.lines == []
    for k, v in init.state_dict().items():
        assert torch.equal(v, net.state_dict()[k])


def test_label_mismatch_is_an_error(data):
    codebook, train, _ = data
    with pytest.raises(DataError):
        M.train_supervised(TokenSplit(train.tokens, train.labels[:-1], None), codebook, tiny())
    with pytest.raises(DataError):
        M.train_supervised(TokenSplit(train.tokens, train.labels + 5, None), codebook, tiny())


def test_checkpoint_round_trip(tmp_path, data):
    codebook, train, val = data
    net, _ = M.train_supervised(train, codebook, tiny(), TrainRecipe(epochs=1, batch_size=8))
    path = M.save(tmp_path / "c.smod", net, codebook.id)
    loaded = M.load(path, codebook)
    Z = torch.from_numpy(codebook.standardized())[torch.from_numpy(val.tokens)]
    with torch.no_grad():
        assert torch.equal(net(Z), loaded(Z))


# ------------------------------------------------------------------ finetune

@pytest.fixture(scope="module")
def pretrained(data):
    codebook, train, _ = data
    cfg = mtm.MTMConfig(backbone=tiny("conv2x2"), decoder_depth=1, decoder_width=8,
                        decoder_heads=2)
    net, _ = mtm.pretrain(train, codebook, cfg, TrainRecipe(epochs=1, batch_size=8))
    return mtm.checkpoint.Checkpoint(mtm.MAGIC, cfg.to_dict(), net.state_dict(), codebook.id)


def test_finetune_copies_encoder(data, pretrained):
    codebook, train, _ = data
    net, log = M.finetune(pretrained, train, codebook, tiny("conv2x2"), TrainRecipe(epochs=0))
    for k, v in net.backbone.state_dict().items():
        assert torch.equal(v, pretrained.state["encoder." + k]), k
    assert not any("stem_reinitialized" in line for line in log.lines)


def test_finetune_reinitializes_mismatched_stem(data, pretrained):
    codebook, train, _ = data
    net, log = M.finetune(pretrained, train, codebook, tiny(), TrainRecipe(epochs=0))
    assert "-1,init,stem_reinitialized,1" in log.lines
    assert torch.equal(net.backbone.blocks[0].attn.qkv.weight,
                       pretrained.state["encoder.blocks.0.attn.qkv.weight"])


def test_finetune_lists_incompatible_params(data, pretrained):
    codebook, train, _ = data
    with pytest.raises(DataError, match="blocks.0.attn.qkv.weight"):
        M.finetune(pretrained, train, codebook, tiny("conv2x2", width=8), TrainRecipe(epochs=0))
    with pytest.raises(DataError, match="missing blocks.1"):
        M.finetune(pretrained, train, codebook, tiny("conv2x2", depth=2), TrainRecipe(epochs=0))


def test_finetune_zero_lr_keeps_parameters(data, pretrained):
    codebook, train, _ = data
    recipe = TrainRecipe(epochs=2, batch_size=8, lr=0.0)
    before, _ = M.finetune(pretrained, train, codebook, tiny("conv2x2"), TrainRecipe(epochs=0))
    after, _ = M.finetune(pretrained, train, codebook, tiny("conv2x2"), recipe)
    for k, v in before.state_dict().items():
        assert torch.equal(v, after.state_dict()[k]), k


def test_finetune_rejects_foreign_codebook(data, pretrained):
    _, train, _ = data
    other = Codebook(np.random.default_rng(5).normal(size=(16, 6)))
    with pytest.raises(DataError):
        M.finetune(pretrained, train, other, tiny("conv2x2"), TrainRecipe(epochs=0))


# ------------------------------------------------------------------ evaluate

@pytest.fixture(scope="module")
def shapes_model():
    images, labels = make_shapes(700, seed=11, num_classes=3)
    tok = PatchTokenizer.fit(images[:300], 4, 64, seed=0, max_patches=10000)
    T = tok.tokenize(images)
    cfg = M.BackboneConfig(grid=(8, 8), in_dim=48, depth=2, width=32, heads=2, K=64,
                           num_classes=3)
    train = TokenSplit(T[:500], labels[:500], None)
    net, _ = M.train_supervised(train, tok.codebook, cfg,
                                TrainRecipe(epochs=12, batch_size=50, lr=2e-3, warmup_epochs=1))
    return net, tok, images, T, labels


def test_evaluate_clean_only(shapes_model):
    net, tok, images, T, labels = shapes_model
    rows = M.evaluate(net, TokenSplit(T[500:], labels[500:], None), tok.codebook)
    assert len(rows) == 1 and rows[0]["corruption"] == "clean"
    assert rows[0]["top1"] > 0.6


def test_evaluate_corruption_rows_and_trend(shapes_model):
    net, tok, images, T, labels = shapes_model
    split = TokenSplit(T[500:], labels[500:], None)
    rows = M.evaluate(net, split, tok.codebook, images[500:], tok,
                      [("gaussian_noise", s) for s in (1, 3, 5)])
    assert [r["severity"] for r in rows] == [0, 1, 3, 5]
    accs = [r["top1"] for r in rows]
    assert accs[3] <= accs[0]
    with pytest.raises(ConfigError):
        M.evaluate(net, split, tok.codebook, corruptions=[("gaussian_blur", 1)])
