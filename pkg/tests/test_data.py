import hashlib
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmfuse.data import (MANIFEST_NAME, DatasetError, PairRecord, PhantomSpec, PhiloxStream, gen_phantom_pair,
                         load_pairs, pair_seed, read_manifest, write_manifest, write_phantom_dataset)
from dmfuse.imaging import is_color, luma
from dmfuse.metrics import average_gradient

M64 = 2**64 - 1


def test_philox_known_answer():
    # Random123 philox4x64-10 vector for counter 0, key 0; the stream starts at counter 1,
    # so the reference block is reached by starting one step before zero
    g = np.random.Philox(key=0, counter=[M64] * 4)
    assert [hex(int(x)) for x in g.random_raw(4)] == [
        "0x16554d9eca36314c", "0xdb20fe9d672d0fdc", "0xd7e772cee186176b", "0x7e68b68aec7ba23b"]


def test_stream_conversions():
    s = PhiloxStream(0)
    raw = PhiloxStream(0).raw(4)
    u = s.uniform((4,))
    np.testing.assert_array_equal(u, (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53)
    assert np.all((u >= 0) & (u < 1))
    s1, s2 = PhiloxStream(5), PhiloxStream(5)
    uu = s2.uniform((2,))
    z = s1.normal(())
    assert z == pytest.approx(math.sqrt(-2 * math.log(1 - uu[0])) * math.cos(2 * math.pi * uu[1]), abs=1e-15)


def test_normal_moments():
    z = PhiloxStream(3).normal((40000,))
    assert abs(z.mean()) < 3 / math.sqrt(40000)
    assert abs(z.var() - 1) < 3 * math.sqrt(2 / 40000)


def test_pair_seed_is_stable():
    h = hashlib.sha256(b"0/mri-ct/train/0").digest()
    assert pair_seed(0, "mri-ct", "train", 0) == int.from_bytes(h[:8], "little")
    assert pair_seed(0, "mri-ct", "train", 0) != pair_seed(0, "mri-ct", "train", 1)


@pytest.mark.parametrize("task", ["mri-ct", "mri-pet", "mri-spect"])
def test_determinism_and_types(task):
    spec = PhantomSpec(seed=42, size=64, task=task)
    a1, b1 = gen_phantom_pair(spec)
    a2, b2 = gen_phantom_pair(spec)
    assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()
    assert a1.shape == (64, 64)
    assert is_color(b1) == (task != "mri-ct")
    assert 0 <= a1.min() and a1.max() <= 1 and 0 <= b1.min() and b1.max() <= 1
    other, _ = gen_phantom_pair(PhantomSpec(seed=43, size=64, task=task))
    assert other.tobytes() != a1.tobytes()


def test_invalid_size():
    for size in (0, 8, 40):
        with pytest.raises(ValueError):
            gen_phantom_pair(PhantomSpec(seed=0, size=size))


@pytest.mark.parametrize("task", ["mri-pet", "mri-spect"])
def test_functional_smoother_than_structural(task):
    for i in range(5):
        a, b = gen_phantom_pair(PhantomSpec(seed=pair_seed(0, task, "train", i), size=64, task=task))
        assert average_gradient(luma(b)) < average_gradient(a)


def test_ct_has_bright_skull():
    for i in range(5):
        _, b = gen_phantom_pair(PhantomSpec(seed=pair_seed(0, "mri-ct", "train", i), size=64, task="mri-ct"))
        assert np.percentile(b, 99) >= 0.9


def test_functional_chroma_saturated():
    _, b = gen_phantom_pair(PhantomSpec(seed=1, size=64, task="mri-pet"))
    sat = b.max(-1) - b.min(-1)
    assert sat.max() > 0.5


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**63), st.sampled_from(["mri-ct", "mri-pet", "mri-spect"]), st.sampled_from([16, 32]))
def test_every_pair_is_valid(seed, task, size):
    a, b = gen_phantom_pair(PhantomSpec(seed=seed, size=size, task=task))
    assert a.shape == b.shape[:2] == (size, size)
    assert np.isfinite(a).all() and np.isfinite(b).all()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantoms")
    write_phantom_dataset(root, seed=0, size=32, train_per_task=30, test_per_task=2)
    return root


def test_training_layout_has_ninety_pairs(dataset):
    train = load_pairs(dataset / MANIFEST_NAME, split="train")
    assert len(train) == 90
    counts = {t: sum(p.task == t for p in train) for t in ("mri-ct", "mri-pet", "mri-spect")}
    assert counts == {"mri-ct": 30, "mri-pet": 30, "mri-spect": 30}
    assert (dataset / "mri-pet" / "test" / "mri-pet-test-001_B.png").exists()


def test_loaded_pairs_match_generator(dataset):
    pair = load_pairs(dataset / MANIFEST_NAME, split="test")[0]
    a, b = gen_phantom_pair(PhantomSpec(seed=pair_seed(0, pair.task, "test", 0), size=32, task=pair.task))
    assert np.max(np.abs(pair.a - a)) <= 0.5 / 255 + 1e-12
    assert np.max(np.abs(pair.b - b)) <= 0.5 / 255 + 1e-12


def test_rewrite_is_byte_identical(dataset, tmp_path):
    write_phantom_dataset(tmp_path, seed=0, size=32, train_per_task=30, test_per_task=2)
    assert (tmp_path / MANIFEST_NAME).read_bytes() == (dataset / MANIFEST_NAME).read_bytes()


def test_tampered_file_names_pair(dataset, tmp_path):
    import shutil
    root = tmp_path / "copy"
    shutil.copytree(dataset, root)
    target = root / "mri-ct" / "test" / "mri-ct-test-000_A.png"
    data = bytearray(target.read_bytes())
    data[-20] ^= 0xFF
    target.write_bytes(bytes(data))
    with pytest.raises(DatasetError, match="mri-ct-test-000.*digest mismatch"):
        load_pairs(root / MANIFEST_NAME)
    target.unlink()
    with pytest.raises(DatasetError, match="mri-ct-test-000.*missing"):
        load_pairs(root / MANIFEST_NAME)


def test_dimension_mismatch(tmp_path):
    from dmfuse.data import file_digest
    from dmfuse.imaging import write_png
    write_png(tmp_path / "a.png", np.zeros((16, 16)))
    write_png(tmp_path / "b.png", np.zeros((32, 32)))
    rec = PairRecord("p", "a.png", "b.png", "mri-ct", "test", file_digest(tmp_path / "a.png"),
                     file_digest(tmp_path / "b.png"))
    write_manifest(tmp_path / MANIFEST_NAME, [rec])
    assert read_manifest(tmp_path / MANIFEST_NAME) == [rec]
    with pytest.raises(DatasetError, match="pair p: dimension mismatch"):
        load_pairs(tmp_path / MANIFEST_NAME)


def test_empty_manifest(tmp_path):
    (tmp_path / MANIFEST_NAME).write_text("")
    assert load_pairs(tmp_path / MANIFEST_NAME) == []
    with pytest.raises(DatasetError):
        load_pairs(tmp_path / "missing.tsv")


def test_malformed_manifest(tmp_path):
    Path(tmp_path / MANIFEST_NAME).write_text("only\ttwo\n")
    with pytest.raises(DatasetError, match="7 tab-separated"):
        read_manifest(tmp_path / MANIFEST_NAME)
