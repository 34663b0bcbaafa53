import numpy as np
import pytest
import torch

from oracles import numeric_grad_check
from stok.augment import AugSpec
from stok.augment.geometry import IDENTITY, affine_params, hflip_params
from stok.codec import Codebook, PatchTokenizer
from stok.errors import ConfigError, DataError, ShapeError
from stok.tokenadapt import (TokenAdaptConfig, TokenAdaptHyper, TokenAdaptModule, TokenPairs,
                             apply_token_adapt, augment_features, token_adapt_loss,
                             token_agreement, train_token_adapt)
from stok.toydata import make_shapes


@pytest.fixture(scope="module")
def toy():
    images, _ = make_shapes(600, seed=3)
    tok = PatchTokenizer.fit(images[:400], 4, 64, seed=0, max_patches=8000)
    return images, tok


@pytest.fixture(scope="module")
def module(toy):
    _, tok = toy
    return TokenAdaptModule(tok.codebook.standardized(), tok.codebook.id).eval()


def test_untrained_module_round_trips_tokens(toy, module):
    images, tok = toy
    T = tok.tokenize(images[400:])
    out = apply_token_adapt(T, AugSpec("identity"), module, tok.codebook, np.random.default_rng(0))
    assert token_agreement(out, T) > 0.99


def test_output_is_valid_token_grid(toy, module):
    images, tok = toy
    T = tok.tokenize(images[:8])
    out = apply_token_adapt(T, AugSpec("affine"), module, tok.codebook, np.random.default_rng(1))
    assert out.shape == T.shape and out.dtype == np.int64
    assert out.min() >= 0 and out.max() < tok.codebook.K


def test_reverse_gives_distributions(toy, module):
    images, tok = toy
    Z = torch.from_numpy(tok.codebook.standardized())[torch.from_numpy(tok.tokenize(images[:4]))]
    with torch.no_grad():
        probs = module.reverse(module.convert(Z)).softmax(-1)
    assert torch.isfinite(probs).all()
    torch.testing.assert_close(probs.sum(-1), torch.ones(probs.shape[:-1]), atol=1e-5, rtol=0)


def test_deterministic_and_sample_independent(toy, module):
    images, tok = toy
    T = tok.tokenize(images[:6])
    spec = AugSpec("hflip")
    a = apply_token_adapt(T, spec, module, tok.codebook, np.random.default_rng(5))
    b = apply_token_adapt(T, spec, module, tok.codebook, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    # each sample is processed on its own: batch result equals per-sample results
    for n in range(len(T)):
        single = apply_token_adapt(T[n], spec, module, tok.codebook, np.random.default_rng(0))
        np.testing.assert_array_equal(single, a[n])


def test_mixup_needs_partner(toy, module):
    images, tok = toy
    T = tok.tokenize(images[:2])
    with pytest.raises(ConfigError):
        apply_token_adapt(T, AugSpec("mixup"), module, tok.codebook, np.random.default_rng(0))
    out = apply_token_adapt(T, AugSpec("mixup"), module, tok.codebook,
                            np.random.default_rng(0), partner=T, lam=0.3)
    assert token_agreement(out, T) > 0.99


def test_unsupported_op_and_wrong_codebook(toy, module):
    images, tok = toy
    T = tok.tokenize(images[:1])
    with pytest.raises(ConfigError):
        apply_token_adapt(T, AugSpec("cutmix"), module, tok.codebook, np.random.default_rng(0))
    other = Codebook(np.random.default_rng(0).normal(size=(64, 48)))
    with pytest.raises(DataError):
        apply_token_adapt(T, AugSpec("hflip"), module, other, np.random.default_rng(0))


def test_shape_errors(module):
    with pytest.raises(ShapeError):
        module.convert(torch.zeros(2, 4, 4, 7))


def test_training_lowers_loss(toy):
    images, tok = toy
    module, log = train_token_adapt(images[:256], tok, [AugSpec("hflip")],
                                    TokenAdaptHyper(epochs=2, batch_size=64))
    losses = [float(line.split(",")[2]) for line in log.lines]
    assert log.header == "epoch,step,loss"
    assert len(losses) == 8 and np.isfinite(losses).all()
    assert losses[-1] < losses[0]


def test_training_is_deterministic(toy):
    images, tok = toy
    hyper = TokenAdaptHyper(epochs=1, batch_size=64)
    _, a = train_token_adapt(images[:128], tok, [AugSpec("hflip"), AugSpec("mixup")], hyper)
    _, b = train_token_adapt(images[:128], tok, [AugSpec("hflip"), AugSpec("mixup")], hyper)
    assert a.text() == b.text()


def test_rejects_unlearnable_op(toy):
    images, tok = toy
    with pytest.raises(ConfigError):
        train_token_adapt(images[:8], tok, [AugSpec("color_adapt")])


def test_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    table = torch.from_numpy(rng.normal(size=(4, 4)))
    module = TokenAdaptModule(table.float(), "x", TokenAdaptConfig(dim=4, K=4, heads=2)).double()
    pairs = TokenPairs(rng.integers(0, 4, (3, 2, 2)), rng.integers(0, 4, (3, 2, 2)),
                       [hflip_params(), IDENTITY, affine_params(10.0, (0.1, 0.0), 5.0)])
    params = [p for p in module.parameters()]
    err = numeric_grad_check(lambda: token_adapt_loss(module, table, pairs), params,
                             max_entries=60)
    assert err < 1e-4


def test_augment_features_flip_matches_grid_flip():
    S = torch.arange(2 * 3 * 4 * 2, dtype=torch.float64).reshape(2, 3, 4, 2)
    out = augment_features(S, [hflip_params(), ("mixup", 0, 0.25)])
    torch.testing.assert_close(out[0], S[0].flip(1))
    torch.testing.assert_close(out[1], 0.25 * S[1] + 0.75 * S[0])


def test_checkpoint_round_trip(tmp_path, toy):
    images, tok = toy
    module, _ = train_token_adapt(images[:64], tok, [AugSpec("hflip")],
                                  TokenAdaptHyper(epochs=1, batch_size=32))
    path = module.save(tmp_path / "ta.stam")
    loaded = TokenAdaptModule.load(path, tok.codebook).eval()
    T = tok.tokenize(images[100:110])
    spec = AugSpec("affine")
    np.testing.assert_array_equal(
        apply_token_adapt(T, spec, module, tok.codebook, np.random.default_rng(2)),
        apply_token_adapt(T, spec, loaded, tok.codebook, np.random.default_rng(2)))
    Z = torch.from_numpy(tok.codebook.standardized())[torch.from_numpy(T)]
    with torch.no_grad():
        assert torch.equal(module.reverse(module.convert(Z)), loaded.reverse(loaded.convert(Z)))
    other = Codebook(np.random.default_rng(0).normal(size=(64, 48)))
    with pytest.raises(DataError):
        TokenAdaptModule.load(path, other)
