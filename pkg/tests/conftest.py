import numpy as np
import pytest

from coarseseg import datasets as D
from coarseseg import noise as N


def make_blob_mask(rng, h=28, w=28, n_blobs=3, r_lo=2, r_hi=6):
    """Random blobby foreground mask (union of axis-aligned boxes)."""
    m = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, n_blobs + 1))):
        r = int(rng.integers(r_lo, r_hi + 1))
        ci = int(rng.integers(r, h - r))
        cj = int(rng.integers(r, w - r))
        m[ci - r:ci + r + 1, cj - r:cj + r + 1] = True
    return m


def attach_noise(ds, level, seed, source=None):
    """Add synthetic positive+negative coarse maps for one level in place."""
    src = source or f"synthL{level}"
    for i, s in enumerate(ds.samples):
        fg = s.gt_label[(s.gt_label != D.IGNORE) & (s.gt_label != 0)]
        cls = int(fg.max()) if fg.size else 1
        sd = seed * 100003 + i
        pos = N.synth_positive_coarse(
            s.gt_label == cls, N.POSITIVE_LEVELS[level], sd, object_class=cls
        )
        neg = N.synth_negative_coarse(
            s.gt_label, cls, N.NEGATIVE_LEVELS[level], sd + 1,
            num_classes=ds.space.num_classes,
        )
        pos.source = src
        neg.source = src
        s.pos_coarse = [cm for cm in s.pos_coarse if (cm.source or "") != src] + [pos]
        s.neg_coarse = [cm for cm in s.neg_coarse if (cm.source or "") != src] + [neg]
    return ds


@pytest.fixture(scope="session")
def digit_images():
    return {
        "train": D.synth_digit_images(48, seed=11, subset="train"),
        "test": D.synth_digit_images(24, seed=12, subset="test"),
    }


@pytest.fixture(scope="session")
def toy_dataset_dirs(tmp_path_factory, digit_images):
    """Small on-disk train/test datasets with level-2 coarse sources."""
    root = tmp_path_factory.mktemp("toyds")
    train = D.build_mnist_seg(digit_images["train"][:16], "binary", 0.5)
    test = D.build_mnist_seg(digit_images["test"][:8], "binary", 0.5)
    test.split_tag = "test"
    attach_noise(train, 2, seed=5)
    attach_noise(test, 2, seed=6)
    D.save_dataset(train, root / "train")
    D.save_dataset(test, root / "test")
    return {"train": str(root / "train"), "test": str(root / "test")}
