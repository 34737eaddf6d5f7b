import json

import numpy as np
import pytest
import torch
from PIL import Image

from lightaug import datasets as ds
from lightaug.simcyclegan import GanBundle
from lightaug.transfer import (ConfigurationError, TransferConfig, TransferManifest,
                               TransferRecord, build_augmented_trainset, count_lowlight,
                               flags_from_label, train_transfer, transfer_batch)

TINY = {"generator": {"base_channels": 4, "downsample_stages": 2, "residual_blocks": 1},
        "discriminator": {"base_channels": 4, "n_layers": 3}}


@pytest.fixture(scope="module")
def pools(tmp_path_factory):
    root = tmp_path_factory.mktemp("pools")
    mk = lambda dom, seed, n: ds.synth_generate(  # noqa: E731
        ds.SyntheticSceneConfig(canvas=(32, 48), light_domain=dom, seed=seed), n, root / dom)
    return mk("bright", 1, 6), mk("dark", 2, 5)


@pytest.fixture(scope="module")
def trained(pools, tmp_path_factory):
    out = tmp_path_factory.mktemp("gan")
    ckpt = train_transfer(TransferConfig(epochs=2, seed=3, gan=TINY), *pools, out)
    return ckpt


def flat(bundle):
    return torch.cat([t.flatten().float() for t in bundle.G_A.state_dict().values()])


def test_training_logs_finite_losses(trained):
    lines = (trained.parent / "gan_log.jsonl").read_text().splitlines()
    assert [json.loads(s)["epoch"] for s in lines] == [1, 2]
    for s in lines:
        assert all(np.isfinite(v) for v in json.loads(s).values())
    assert GanBundle.load(trained).epoch == 2


def test_zero_epochs_is_initialization(pools, tmp_path):
    ckpt = train_transfer(TransferConfig(epochs=0, seed=3, gan=TINY), *pools, tmp_path)
    fresh = GanBundle(GanBundle.load(ckpt).cfg, 3)
    assert torch.equal(flat(GanBundle.load(ckpt)), flat(fresh))


def test_training_is_deterministic(pools, trained, tmp_path):
    again = train_transfer(TransferConfig(epochs=2, seed=3, gan=TINY), *pools, tmp_path)
    assert torch.equal(flat(GanBundle.load(again)), flat(GanBundle.load(trained)))


def test_empty_domain_rejected(pools, tmp_path):
    with pytest.raises(ConfigurationError):
        train_transfer(TransferConfig(epochs=1, gan=TINY), ds.DomainDataset("X", []), pools[1],
                       tmp_path)


def test_unreadable_images_tolerated_up_to_limit(pools, tmp_path):
    bright, dark = pools
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png")
    one_bad = ds.DomainDataset("X", bright.entries + [ds.ListEntry(bad)])
    train_transfer(TransferConfig(epochs=1, gan=TINY, max_skip_fraction=0.2), one_bad, dark,
                   tmp_path / "ok")
    many_bad = ds.DomainDataset("X", bright.entries[:2] + [ds.ListEntry(bad)] * 2)
    with pytest.raises(ConfigurationError):
        train_transfer(TransferConfig(epochs=1, gan=TINY), many_bad, dark, tmp_path / "no")


def test_transfer_preserves_labels_and_resolution(pools, trained, tmp_path):
    bright, _ = pools
    odd = tmp_path / "src" / "odd.png"
    odd.parent.mkdir()
    Image.fromarray(np.full((37, 61, 3), 120, np.uint8)).save(odd)
    ds.write_lines_file(ds.lines_path_for(odd), [[(1.0, 2.0), (3.0, 30.0)]])
    src = ds.DomainDataset("X", bright.entries + [ds.ListEntry(odd)])
    man = transfer_batch(trained, src, tmp_path / "out")
    assert len(man.records) == len(man.converted) == 7
    for e, r in zip(src.entries, man.records):
        assert r.source == e.image_path and r.generated.is_file()
        with Image.open(r.source) as a, Image.open(r.generated) as b:
            assert a.size == b.size
        src_lines = ds.lines_path_for(e.image_path)
        assert ds.lines_path_for(r.generated).read_bytes() == src_lines.read_bytes()
        assert r.label == (e.seg_label_path or src_lines)
    back = TransferManifest.read(tmp_path / "out" / "manifest.tsv")
    assert [(r.source, r.generated, r.label) for r in back.records] == \
        [(r.source, r.generated, r.label) for r in man.records]
    assert back.checkpoint_id == man.checkpoint_id
    again = transfer_batch(trained, src, tmp_path / "again")
    for a, b in zip(man.records, again.records):
        assert a.generated.read_bytes() == b.generated.read_bytes()


def test_transfer_skips_corrupt_and_handles_empty(pools, trained, tmp_path):
    bright, _ = pools
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"garbage")
    entries = bright.entries * 2 + [ds.ListEntry(bad)]
    man = transfer_batch(trained, ds.DomainDataset("X", entries), tmp_path / "a")
    assert len(man.records) == 13 and len(man.converted) == 12
    assert man.records[-1].skipped.startswith("decode failed")
    assert TransferManifest.read(tmp_path / "a" / "manifest.tsv").records[-1].skipped
    with pytest.raises(RuntimeError):
        transfer_batch(trained, ds.DomainDataset("X", bright.entries[:2] + [ds.ListEntry(bad)]),
                       tmp_path / "b")
    empty = transfer_batch(trained, ds.DomainDataset("X", []), tmp_path / "c")
    assert empty.records == []
    with pytest.raises(FileNotFoundError):
        transfer_batch(tmp_path / "missing.pt", ds.DomainDataset("X", []), tmp_path / "d")


def fake_manifest(tmp_path, n):
    label = tmp_path / "label.png"
    mask = np.zeros((4, 4), np.uint8)
    mask[0, 0], mask[1, 1] = 1, 3
    Image.fromarray(mask).save(label)
    recs = [TransferRecord(tmp_path / f"s{i}.png", tmp_path / f"g{i}.png", label) for i in range(n)]
    return TransferManifest(recs), label


def test_flags_from_label(tmp_path):
    _, label = fake_manifest(tmp_path, 0)
    assert flags_from_label(label, 4) == [1, 0, 1, 0]


def test_augmented_cardinality_and_arithmetic(tmp_path):
    man, _ = fake_manifest(tmp_path, 13_000)
    real = [ds.ListEntry(tmp_path / f"r{i}.png", tmp_path / "label.png", [1, 0, 0, 0],
                         "night" if i % 2 else "normal") for i in range(10)]
    assert count_lowlight(real) == 5
    path = build_augmented_trainset(real, man, 0.25, 0, tmp_path / "a.txt", 4, lowlight_count=13_000)
    assert len(path.read_text().splitlines()) == 10 + 3_250
    path = build_augmented_trainset(real, man, 1, 0, tmp_path / "b.txt", 4, lowlight_count=13_000)
    assert len(path.read_text().splitlines()) == 10 + 13_000
    for n in (0.25, 0.5, 1, 1.3):
        path = build_augmented_trainset(real, man, n, 0, tmp_path / "c.txt", 4)
        assert len(path.read_text().splitlines()) == 10 + round(n * 5)


def test_augmented_sampling_seeded_and_errors(tmp_path):
    man, _ = fake_manifest(tmp_path, 40)
    real = [ds.ListEntry(tmp_path / "r.png", tmp_path / "label.png", [1, 1, 1, 1])]
    a = build_augmented_trainset(real, man, 1, 5, tmp_path / "a.txt", lowlight_count=20).read_text()
    b = build_augmented_trainset(real, man, 1, 5, tmp_path / "b.txt", lowlight_count=20).read_text()
    c = build_augmented_trainset(real, man, 1, 6, tmp_path / "c.txt", lowlight_count=20).read_text()
    assert a == b and a != c
    picked = a.splitlines()[1:]
    assert len(set(picked)) == len(picked) == 20
    assert all(line.endswith("1 0 1 0") for line in picked)
    with pytest.raises(ConfigurationError, match="short by 10"):
        build_augmented_trainset(real, man, 1, 0, tmp_path / "d.txt", lowlight_count=50)
    with pytest.raises(ConfigurationError):
        build_augmented_trainset(real, man, 0, 0, tmp_path / "d.txt", lowlight_count=5)
    with pytest.raises(ConfigurationError):
        build_augmented_trainset(real, TransferManifest(), 1, 0, tmp_path / "d.txt", lowlight_count=5)
