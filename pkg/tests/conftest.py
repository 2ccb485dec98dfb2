import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from scsc import filter_update as fu  # noqa: E402
from scsc.core import contrast_normalize, save_image  # noqa: E402

# every filter update performed anywhere in the suite, as (caller, max filter norm)
FILTER_NORM_LOG = []
NORM_BOUND = 1 + 1e-12
# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_collection_modifyitems(config, items):
    # acceptance criteria run after the unit tests so the filter-norm check covers the whole suite
    items.sort(key=lambda item: item.module.__name__ == "test_acceptance")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def _recording(fn):
    def wrapper(*args, **kwargs):
        out = fn(*args, **kwargs)
        filters = out.filters if hasattr(out, "filters") else out
        worst = float(np.sqrt((np.asarray(filters) ** 2).sum(axis=(1, 2))).max())
        FILTER_NORM_LOG.append((fn.__name__, worst))
        assert worst <= NORM_BOUND, f"{fn.__name__} returned a filter of norm {worst!r}"
        return out

    return wrapper


@pytest.fixture(autouse=True)
def _check_filter_norms(monkeypatch):
    monkeypatch.setattr(fu, "update_filters_batch", _recording(fu.update_filters_batch))
    monkeypatch.setattr(fu, "update_filters_online", _recording(fu.update_filters_online))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- desk-scale image corpus from scikit-image's bundled samples --------------------------

SAMPLE_NAMES = [
    "camera", "coins", "moon", "astronaut", "chelsea", "coffee", "rocket", "brick", "grass",
    "gravel", "clock", "cell", "page", "text", "immunohistochemistry", "hubble_deep_field", "cat",
]


def _sample(name):
    import skimage.data
    from skimage.color import rgb2gray
    from skimage.transform import rescale

    im = getattr(skimage.data, name)()
    if im.ndim == 3:
        im = rgb2gray(im[..., :3])
    im = im.astype(float)
    im = (im - im.min()) / (im.max() - im.min())
    return rescale(im, 0.25, anti_aliasing=True)


_SOURCES = {}


def raw_crops(n, size, seed, names=SAMPLE_NAMES):
    """``n`` random ``size x size`` crops in ``[0, 1]``, cycling through the sample images."""
    rng = np.random.default_rng(seed)
    out = []
    i = 0
    while len(out) < n:
        name = names[i % len(names)]
        i += 1
        if name not in _SOURCES:
            _SOURCES[name] = _sample(name)
        src = _SOURCES[name]
        H, W = src.shape
        if H < size or W < size:
            continue
        a = rng.integers(0, H - size + 1)
        b = rng.integers(0, W - size + 1)
        out.append(src[a : a + size, b : b + size])
    return np.stack(out)


def desk_corpus(n, size, seed):
    """Contrast-normalized crops, the training/evaluation data for desk-scale experiments."""
    return np.stack([contrast_normalize(c) for c in raw_crops(n, size, seed)])


def write_pngs(directory, images):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, im in enumerate(images):
        save_image(directory / f"img{i:03d}.png", im)
    return directory
