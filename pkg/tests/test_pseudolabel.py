import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from scipy import ndimage

from milboundary import net, pseudolabel as pl
from milboundary.imaging import InvalidInput
from milboundary.net import NetConfig
from milboundary.pseudolabel import MsfConfig, NmsConfig

SMALL = NetConfig(num_classes=3, in_size=24, channels=(4, 6, 8, 8), proj_width=3, ag_hidden=5)


@pytest.fixture(scope="module")
def model():
    params = net.init_params(SMALL, seed=11)
    rng = np.random.default_rng(5)
    for k in params:
        if k.endswith(".b"):
            params[k] = rng.normal(0, 0.3, params[k].shape).astype(np.float32)
    image = rng.integers(0, 256, (24, 24, 3), dtype=np.uint8)
    return params, image


def test_config_validation():
    with pytest.raises(InvalidInput):
        MsfConfig(scales=())
    with pytest.raises(InvalidInput):
        MsfConfig(scales=(1.0, 0.0))
    with pytest.raises(InvalidInput):
        NmsConfig(radius=0)
    with pytest.raises(InvalidInput):
        NmsConfig(multiplier=0.9)


def test_single_scale_equals_forward(model):
    params, image = model
    ag, aw, fin = pl.msf_predict(params, image, SMALL, MsfConfig(scales=(1.0,), use_flip=False))
    out = net.forward(params, net.preprocess(image), SMALL)
    assert np.array_equal(ag, out.b_ag) and np.array_equal(aw, out.b_aw)
    assert np.array_equal(fin, aw * ag)


def test_msf_commutes_with_mirroring(model):
    params, image = model
    msf = MsfConfig()
    a = pl.msf_predict(params, image, SMALL, msf)
    b = pl.msf_predict(params, image[:, ::-1], SMALL, msf)
    assert np.allclose(b[0], a[0][:, ::-1], rtol=0, atol=1e-6)
    assert np.allclose(b[1], a[1][:, :, ::-1], rtol=0, atol=1e-6)


def test_msf_is_mean_of_passes(model):
    params, image = model
    from milboundary.imaging import resize_bilinear
    x = net.preprocess(image)
    ags, aws = [], []
    for s in (0.75, 1.0, 1.25):
        for flip in (False, True):
            xi = x[:, :, ::-1] if flip else x
            n = int(round(24 * s))
            xi = resize_bilinear(xi, n, n) if n != 24 else xi
            out = net.forward(params, np.ascontiguousarray(xi), SMALL)
            ag = resize_bilinear(out.b_ag, 24, 24) if n != 24 else out.b_ag
            aw = resize_bilinear(out.b_aw, 24, 24) if n != 24 else out.b_aw
            if flip:
                ag, aw = ag[:, ::-1], aw[:, :, ::-1]
            ags.append(ag)
            aws.append(aw)
    ag, aw, fin = pl.msf_predict(params, image, SMALL, MsfConfig())
    assert np.allclose(ag, np.mean(ags, axis=0), atol=1e-7)
    assert np.allclose(aw, np.mean(aws, axis=0), atol=1e-7)
    assert np.allclose(fin, aw * ag[None])


def test_filter_irrelevant_classes(rng):
    m = rng.random((3, 5, 5))
    assert np.array_equal(pl.filter_irrelevant_classes(m, [0, 1, 2]), m)
    assert not pl.filter_irrelevant_classes(m, []).any()
    out = pl.filter_irrelevant_classes(m, [1])
    assert not out[[0, 2]].any() and out[1].tobytes() == m[1].tobytes()
    assert np.array_equal(pl.filter_irrelevant_classes(out, [1]), out)


def test_nms_zero_map():
    assert not pl.nms_thin(np.zeros((10, 10))).any()


def test_nms_keeps_thin_lines():
    m = np.zeros((20, 20))
    m[:, 7] = 0.8
    assert np.array_equal(pl.nms_thin(m), m)
    assert np.array_equal(pl.nms_thin(m.T), m.T)


def test_nms_thins_three_pixel_ridge():
    m = np.zeros((20, 20))
    m[:, 6], m[:, 7], m[:, 8] = 0.5, 1.0, 0.5
    out = pl.nms_thin(m)
    assert np.array_equal(out[:, 7], m[:, 7])
    assert not np.delete(out, 7, axis=1).any()


def test_nms_diagonal_ridge():
    yy, xx = np.mgrid[0:24, 0:24]
    d = np.abs(xx - yy)
    m = np.where(d == 0, 1.0, np.where(d == 1, 0.6, 0.0))
    out = pl.nms_thin(m)
    assert np.array_equal(out > 0, d == 0)


def smooth_maps(seed):
    rng = np.random.default_rng(seed)
    x = ndimage.gaussian_filter(rng.random((32, 32)), rng.uniform(0.7, 3.0))
    return (x - x.min()) / (x.max() - x.min())


@pytest.mark.parametrize("seed", range(10))
def test_nms_idempotent_and_never_raises(seed):
    m = smooth_maps(seed)
    once = pl.nms_thin(m)
    assert np.array_equal(pl.nms_thin(once), once)
    assert np.all(once <= m)
    kept = once > 0
    assert np.array_equal(once[kept], m[kept])


@pytest.mark.parametrize("seed", range(5))
def test_single_pass_is_monotone_in_multiplier(seed):
    m = smooth_maps(seed)
    prev = None
    for mult in (1.0, 1.1, 1.3):
        s = pl.nms_thin(m, NmsConfig(multiplier=mult), max_iter=1) > 0
        if prev is not None:
            assert not (prev & ~s).any()
        prev = s


@pytest.mark.parametrize("seed", range(5))
def test_filter_commutes_with_nms(seed):
    rng = np.random.default_rng(seed)
    m = np.stack([smooth_maps(seed + 10 * c) for c in range(3)])
    labels = sorted(set(rng.integers(0, 3, 2).tolist()))
    a = pl.nms_channels(pl.filter_irrelevant_classes(m, labels))
    b = pl.filter_irrelevant_classes(pl.nms_channels(m), labels)
    assert np.array_equal(a, b)


def test_otsu_bimodal():
    res = pl.otsu_threshold([0.1] * 100 + [0.9] * 100)
    assert 0.1 < res.threshold < 0.9 and not res.degenerate


def test_otsu_constant_is_degenerate():
    res = pl.otsu_threshold([0.4] * 7)
    assert res.threshold == 0.4 and res.degenerate


def test_otsu_empty():
    with pytest.raises(InvalidInput):
        pl.otsu_threshold([])


def otsu_oracle(v, bins=256):
    """Direct evaluation of the between-class variance at every bin edge (floats on bin centres)."""
    v = np.asarray(v, float)
    lo, hi = v.min(), v.max()
    idx = pl.histogram_bins(v, lo, hi, bins)
    best, best_k = -1.0, None
    for k in range(1, bins):
        upper = idx >= k
        n1, n0 = upper.sum(), (~upper).sum()
        if n0 == 0 or n1 == 0:
            continue
        centres = lo + (idx + 0.5) * (hi - lo) / bins
        w0, w1 = n0 / len(v), n1 / len(v)
        var = w0 * w1 * (centres[~upper].mean() - centres[upper].mean()) ** 2
        if var > best * (1 + 1e-12):
            best, best_k = var, k
    return lo + best_k * (hi - lo) / bins


@given(hnp.arrays(np.float64, st.integers(2, 60), elements=st.floats(1e-3, 1.0)))
def test_otsu_matches_exhaustive_search(v):
    if v.min() == v.max():
        return
    assert pl.otsu_threshold(v).threshold == pytest.approx(otsu_oracle(v), abs=1e-12)


def test_pseudo_labels_zero_model():
    params = {k: np.zeros(s, np.float32) for k, s in SMALL.param_shapes().items()}
    params["aw.o.b"][:] = -200.0  # sigmoid underflows to zero
    image = np.zeros((24, 24, 3), np.uint8)
    res = pl.make_pseudo_labels(params, image, [0, 2], SMALL)
    assert not res.hard.any() and res.flags["otsu_degenerate"]


def test_hard_bits_inside_relevant_support(model):
    params, image = model
    res = pl.make_pseudo_labels(params, image, [1, 2], SMALL)
    assert not res.hard[0].any()
    assert np.all(res.soft[res.hard] > 0)
    assert res.hard.any()
