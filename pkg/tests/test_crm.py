from itertools import permutations

import numpy as np
import pytest

from topreid import tensor as T
from topreid.crm import PAIRS, ComplementaryReconstruction, TransRe, crm_loss, pair_key, pair_loss, reconstruct_missing
from topreid.model import ModelConfig, TopReID
from topreid.vit import SPECTRA, EncoderConfig

TINY = EncoderConfig(image_height=8, image_width=8, patch_size=4, embed_dim=8, depth=1, heads=2)


def crm(rng, **kw):
    return ComplementaryReconstruction(rng, 8, 2, **kw)


def randn(rng, *shape):
    return T.tensor(rng.normal(size=shape))


def images(rng, b=4):
    return {s: rng.normal(size=(b, 8, 8, 3)).astype(np.float32) for s in SPECTRA}


def test_six_ordered_pairs():
    assert PAIRS == ("R2N", "R2T", "N2R", "N2T", "T2R", "T2N")
    assert pair_key("N", "T") == "N2T"
    with pytest.raises(ValueError):
        pair_key("R", "R")
    with pytest.raises(ValueError):
        pair_key("R", "X")


def test_trans_re_preserves_shape(rng):
    c = crm(rng)
    x = randn(rng, 3, 5, 8)
    assert c.trans_re(x, "R", "N").shape == (3, 5, 8)
    with pytest.raises(ValueError):
        c.trans_re(x, "T", "T")


def test_zeroed_trans_re_is_identity(rng):
    block = TransRe(rng, 8, 2, depth=2)
    for b in block.blocks:
        b.zero_residual_branches()
    x = randn(rng, 5, 8)
    np.testing.assert_array_equal(block(x).data, x.data)


def test_pair_blocks_are_independent(rng):
    c = crm(rng)
    x = randn(rng, 5, 8)
    assert not np.allclose(c.trans_re(x, "R", "N").data, c.trans_re(x, "R", "T").data)


@pytest.mark.parametrize("depth", [1, 2, 4])
def test_depth_is_configurable(rng, depth):
    assert all(len(b.blocks) == depth for b in crm(rng, depth=depth).blocks.values())


# -- loss --------------------------------------------------------------------

def _reals(rng, m=2, d=4, batch=(3,)):
    return {s: randn(rng, *batch, m + 1, d) for s in SPECTRA}


@pytest.mark.parametrize("variant", ["mse", "mae", "rmse"])
@pytest.mark.parametrize("reduction", ["sum", "mean"])
def test_perfect_reconstruction_costs_exactly_zero(rng, variant, reduction):
    reals = _reals(rng)
    recons = {k: reals[k[-1]] for k in PAIRS}
    assert crm_loss(recons, reals, variant, reduction).item() == 0.0


def test_single_token_constant_offset_gives_squared_norm(f64):
    c = np.array([0.5, -1.0, 2.0, 0.25])
    real = T.tensor(np.arange(4.0).reshape(1, 4))
    recon = T.tensor(real.data + c)
    assert pair_loss(recon, real, "mse", "sum").item() == pytest.approx(float(c @ c), rel=1e-15)
    assert pair_loss(recon, real, "mse", "mean").item() == pytest.approx(float(c @ c) / 4, rel=1e-15)


def oracle_crm(recons, reals, variant, reduction):
    # explicit loops over pairs, samples and tokens
    total = 0.0
    for a, b in permutations(SPECTRA, 2):
        r, t = recons[f"{a}2{b}"], reals[b]
        per_sample = []
        for n in range(r.shape[0]):
            vals = []
            for j in range(r.shape[1]):
                diff = r[n, j] - t[n, j]
                if variant == "mae":
                    v = sum(abs(x) for x in diff)
                else:
                    v = sum(x * x for x in diff)
                vals.append(v / len(diff) if reduction == "mean" else v)
            mean_tok = sum(vals) / len(vals)
            per_sample.append(np.sqrt(mean_tok) if variant == "rmse" else mean_tok)
        total += sum(per_sample) / len(per_sample)
    return total


@pytest.mark.parametrize("variant", ["mse", "mae", "rmse"])
@pytest.mark.parametrize("reduction", ["sum", "mean"])
def test_loss_matches_straight_line_oracle(f64, variant, reduction):
    rng = np.random.default_rng(11)
    reals = _reals(rng)
    recons = {k: randn(rng, 3, 3, 4) for k in PAIRS}
    got = crm_loss(recons, reals, variant, reduction).item()
    want = oracle_crm({k: v.data for k, v in recons.items()}, {k: v.data for k, v in reals.items()}, variant, reduction)
    assert got == pytest.approx(want, rel=1e-12)


def test_loss_is_nonnegative_and_zero_only_at_targets(rng):
    reals = _reals(rng)
    recons = {k: reals[k[-1]] for k in PAIRS}
    recons["T2N"] = T.tensor(reals["N"].data + 1e-3)
    assert crm_loss(recons, reals).item() > 0


def test_missing_term_is_an_error(rng):
    reals = _reals(rng)
    recons = {k: reals[k[-1]] for k in PAIRS if k != "N2T"}
    with pytest.raises(KeyError, match="N2T"):
        crm_loss(recons, reals)


def test_exactly_six_terms_reach_the_loss(rng):
    reals = _reals(rng)
    recons = {k: T.Tensor(rng.normal(size=(3, 3, 4)), requires_grad=True) for k in PAIRS}
    extra = T.Tensor(rng.normal(size=(3, 3, 4)), requires_grad=True)
    grads = T.backward(crm_loss({**recons, "X2Y": extra}, reals))
    assert sum(recons[k] in grads for k in PAIRS) == 6
    assert extra not in grads


def test_shape_mismatch_is_rejected(rng):
    with pytest.raises(T.ShapeError):
        pair_loss(randn(rng, 3, 4), randn(rng, 2, 4))


def test_unknown_options_are_rejected(rng):
    with pytest.raises(ValueError):
        crm(rng, loss_variant="huber")
    with pytest.raises(ValueError):
        crm(rng, reduction="max")
    with pytest.raises(ValueError):
        pair_loss(randn(rng, 2, 4), randn(rng, 2, 4), "huber")


def test_gradients_reach_targets_unless_detached(rng):
    c = crm(rng)
    reals = {s: T.Tensor(rng.normal(size=(2, 5, 8)), requires_grad=True) for s in SPECTRA}
    grads = {}
    for detach in (False, True):
        c.detach_targets = detach
        g = T.backward(c.loss(c.reconstruct_all(reals), reals))
        assert all(p in g for p in c.parameters())
        grads[detach] = {s: g[reals[s]] for s in SPECTRA}  # sources always get gradient
    # the target-side contribution disappears when detached
    assert all(not np.allclose(grads[False][s], grads[True][s]) for s in SPECTRA)


def test_loss_gradients_pass_grad_check(f64, rng):
    c = crm(rng)
    for p in c.parameters():
        p.data[...] = rng.normal(scale=0.3, size=p.shape)
    reals = {s: T.Tensor(rng.normal(size=(2, 3, 8)), requires_grad=True) for s in SPECTRA}
    for variant in ("mse", "mae", "rmse"):
        c.loss_variant = variant

        def f():
            return c.loss(c.reconstruct_all(reals), reals)

        assert T.grad_check(f, list(reals.values()) + c.parameters(), step=1e-5, coords_per_param=8) < 1e-5


# -- missing-spectrum fill ---------------------------------------------------------

class FixedCRM:
    """Stand-in with prescribed reconstructions."""

    def __init__(self, table):
        self.table = table

    def trans_re(self, tokens, source, target):
        return self.table[pair_key(source, target)]


def test_fill_is_the_mean_of_two_reconstructions(rng):
    a, b = randn(rng, 5, 8), randn(rng, 5, 8)
    fake = FixedCRM({"N2R": a, "T2R": b})
    out = reconstruct_missing(fake, {"N": None, "T": None}, {"R"})
    np.testing.assert_array_equal(out["R"].data, (a.data + b.data) * np.float32(0.5))
    np.testing.assert_allclose(out["R"].data, (a.data + b.data) / 2, rtol=1e-6)


def test_equal_reconstructions_fill_with_either(rng):
    a = randn(rng, 5, 8)
    out = reconstruct_missing(FixedCRM({"N2R": a, "T2R": a}), {"N": None, "T": None}, {"R"})
    np.testing.assert_array_equal(out["R"].data, a.data)


def test_single_source_fill(rng):
    c = crm(rng)
    f_n = randn(rng, 5, 8)
    out = c.reconstruct_missing({"N": f_n}, {"R", "T"})
    assert set(out) == {"R", "T"}
    np.testing.assert_array_equal(out["R"].data, c.trans_re(f_n, "N", "R").data)
    np.testing.assert_array_equal(out["T"].data, c.trans_re(f_n, "N", "T").data)


def test_fill_contract_errors(rng):
    c = crm(rng)
    with pytest.raises(ValueError):
        c.reconstruct_missing({}, {"R", "N", "T"})
    with pytest.raises(ValueError):
        c.reconstruct_missing({"R": randn(rng, 5, 8)}, {"R"})


# -- model-level substitution ---------------------------------------------------------

@pytest.fixture
def model():
    return TopReID(ModelConfig(encoder=TINY, num_classes=4))


def test_empty_missing_set_reproduces_forward_bit_exactly(model, rng):
    imgs = images(rng)
    full = model.forward(imgs).fused.f_tp.data
    np.testing.assert_array_equal(model.forward_with_missing(imgs, ()).data, full)
    np.testing.assert_array_equal(model.forward_with_missing(imgs, "").data, full)


@pytest.mark.parametrize("missing", [{"R"}, {"N"}, {"T"}, {"R", "N"}, {"R", "T"}, {"N", "T"}])
def test_feature_length_does_not_depend_on_missing_set(model, rng, missing):
    assert model.forward_with_missing(images(rng), missing).shape == (4, 24)


def test_missing_nir_changes_the_feature(model, rng):
    imgs = images(rng)
    full = model.forward(imgs)
    filled = model.crm.reconstruct_missing({s: full.tapped[s] for s in ("R", "T")}, {"N"})["N"]
    assert not np.array_equal(filled.data, full.tapped["N"].data)
    assert not np.array_equal(model.forward_with_missing(imgs, {"N"}).data, full.fused.f_tp.data)


def test_missing_images_are_never_read(model, rng):
    imgs = images(rng)
    a = model.forward_with_missing(imgs, {"T"}).data
    imgs["T"] = np.full_like(imgs["T"], np.nan)
    np.testing.assert_array_equal(model.forward_with_missing(imgs, {"T"}).data, a)


def test_zero_fill_substitutes_zero_tokens(model, rng):
    imgs = images(rng)
    _, tapped = model.complete_tokens(imgs, {"N"}, fill="zeros")
    np.testing.assert_array_equal(tapped["N"].data, 0)


def test_reconstruction_needs_crm(rng):
    m = TopReID(ModelConfig(encoder=TINY, num_classes=4, use_crm=False))
    with pytest.raises(ValueError, match="CRM"):
        m.forward_with_missing(images(rng), {"N"})
    assert m.forward_with_missing(images(rng), {"N"}, fill="zeros").shape == (4, 24)
