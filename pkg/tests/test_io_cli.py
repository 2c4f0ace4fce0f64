import json
import math
import struct

import numpy as np
import pytest

import feelsim
from feelsim.io_cli import (
    GLOBAL_HEADER,
    WORKERS_HEADER,
    ConfigError,
    ExperimentConfig,
    IdxFormatError,
    build_workers,
    cli_main,
    generate_synthetic,
    load_config,
    load_dataset,
    load_mnist_idx,
    run_from_config,
    split_train_test,
    write_config,
)
from feelsim.learning import LabeledDataset
from feelsim.streams import DOMAIN_DATA, substream


def small_config(**over):
    base = dict(
        rounds=2, workers=4, trials=1, seed=5, select_fraction=0.5,
        threshold=0.7, epochs=2, batch_size=32, learning_rate=0.05,
        bandwidth_hz=1e6, noise_power_w=1e-12, cycles_per_sample=5e5,
        distance_min_m=10.0, distance_max_m=60.0,
        synthetic_samples=400, synthetic_dim=8, synthetic_classes=4,
        synthetic_spread=0.3, train_fraction=0.8,
    )
    base.update(over)
    return ExperimentConfig(**base)


def write_idx_pair(tmp_path, images, labels):
    n, rows, cols = images.shape
    img_path = tmp_path / "images.idx"
    lab_path = tmp_path / "labels.idx"
    img_path.write_bytes(struct.pack(">IIII", 0x803, n, rows, cols) + images.tobytes())
    lab_path.write_bytes(struct.pack(">II", 0x801, n) + labels.tobytes())
    return img_path, lab_path


class TestConfig:
    def test_round_trip_exact(self, tmp_path):
        cfg = small_config(deadline_s=0.25, energy_budget_j=3.5, hidden_width=12)
        path = tmp_path / "cfg.json"
        write_config(cfg, path)
        assert load_config(path) == cfg

    def test_infinite_budget_serializes_as_null(self, tmp_path):
        cfg = small_config()  # budget defaults to infinity
        path = tmp_path / "cfg.json"
        write_config(cfg, path)
        raw = json.loads(path.read_text())
        assert raw["energy_budget_j"] is None
        back = load_config(path)
        assert math.isinf(back.energy_budget_j)

    def test_dbm_conversions(self):
        cfg = small_config(p_min_dbm=-10.0, p_max_dbm=20.0)
        assert cfg.p_min_w == pytest.approx(1e-4, rel=1e-15)
        assert cfg.p_max_w == pytest.approx(0.1, rel=1e-15)

    def test_unknown_field_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{"rounds": 3, "rownds": 4}\n')
        with pytest.raises(ConfigError, match="rownds"):
            load_config(path)

    def test_bad_json_reports_position(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{\n  "rounds": 3,\n}\n')
        with pytest.raises(ConfigError, match=r"line 3"):
            load_config(path)

    def test_non_object_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("[1, 2]\n")
        with pytest.raises(ConfigError, match="JSON object"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "nope.json")

    def test_wrong_value_type_wrapped(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{"rounds": "ten"}\n')
        with pytest.raises(ConfigError):
            load_config(path)

    def test_constraints_enforced(self):
        with pytest.raises(ConfigError, match="rounds"):
            small_config(rounds=0)
        with pytest.raises(ConfigError, match="select_fraction"):
            small_config(select_fraction=1.5)
        with pytest.raises(ConfigError, match="bandwidth_mode"):
            small_config(bandwidth_mode="magic")
        with pytest.raises(ConfigError, match="train_fraction"):
            small_config(train_fraction=1.0)
        with pytest.raises(ConfigError, match="mnist"):
            small_config(data_source="mnist")
        with pytest.raises(ConfigError, match="p_min_dbm"):
            small_config(p_min_dbm=25.0, p_max_dbm=20.0)


class TestSyntheticData:
    def test_deterministic(self):
        a = generate_synthetic(8, 4, 200, 0.3, np.random.default_rng(7))
        b = generate_synthetic(8, 4, 200, 0.3, np.random.default_rng(7))
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_near_balanced_labels(self):
        data = generate_synthetic(8, 4, 403, 0.3, np.random.default_rng(8))
        counts = np.bincount(data.labels, minlength=4)
        assert counts.sum() == 403
        assert counts.max() - counts.min() <= 1

    def test_class_means_separated(self):
        data = generate_synthetic(6, 4, 4000, 0.05, np.random.default_rng(9))
        for c in range(4):
            mean = data.features[data.labels == c].mean(axis=0)
            want = np.zeros(6)
            want[c] = 1.0
            assert np.allclose(mean, want, atol=0.02)

    def test_means_stay_distinct_beyond_dim(self):
        # classes wrap around the axes with a growing offset
        data = generate_synthetic(2, 4, 8000, 0.05, np.random.default_rng(10))
        m0 = data.features[data.labels == 0].mean(axis=0)
        m2 = data.features[data.labels == 2].mean(axis=0)
        assert m0[0] == pytest.approx(1.0, abs=0.02)
        assert m2[0] == pytest.approx(2.0, abs=0.02)

    def test_errors(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            generate_synthetic(8, 1, 100, 0.3, rng)
        with pytest.raises(ValueError):
            generate_synthetic(8, 4, 3, 0.3, rng)
        with pytest.raises(ValueError):
            generate_synthetic(8, 4, 100, 0.0, rng)


class TestIdxLoading:
    def test_load_scale_and_shuffle(self, tmp_path):
        rng = np.random.default_rng(20)
        images = rng.integers(0, 256, size=(7, 4, 3), dtype=np.uint8)
        labels = rng.integers(0, 10, size=7, dtype=np.uint8)
        img, lab = write_idx_pair(tmp_path, images, labels)
        data = load_mnist_idx(img, lab, None, np.random.default_rng(21))
        assert data.features.shape == (7, 12)
        assert data.features.min() >= 0.0 and data.features.max() <= 1.0
        # same shuffle stream recovers the pairing
        order = np.random.default_rng(21).permutation(7)
        assert np.array_equal(data.labels, labels[order].astype(np.int64))
        assert np.array_equal(data.features, images.reshape(7, 12)[order] / 255.0)

    def test_subset(self, tmp_path):
        images = np.zeros((10, 2, 2), dtype=np.uint8)
        labels = np.arange(10, dtype=np.uint8)
        img, lab = write_idx_pair(tmp_path, images, labels)
        data = load_mnist_idx(img, lab, 4, np.random.default_rng(22))
        assert len(data) == 4
        with pytest.raises(ValueError):
            load_mnist_idx(img, lab, 11, np.random.default_rng(22))
        with pytest.raises(ValueError):
            load_mnist_idx(img, lab, 0, np.random.default_rng(22))

    def test_bad_magic(self, tmp_path):
        images = np.zeros((2, 2, 2), dtype=np.uint8)
        labels = np.zeros(2, dtype=np.uint8)
        img, lab = write_idx_pair(tmp_path, images, labels)
        with pytest.raises(IdxFormatError, match="magic"):
            load_mnist_idx(lab, lab, None, np.random.default_rng(0))
        with pytest.raises(IdxFormatError, match="magic"):
            load_mnist_idx(img, img, None, np.random.default_rng(0))

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "short.idx"
        path.write_bytes(b"\x00\x00")
        with pytest.raises(IdxFormatError, match="truncated"):
            load_mnist_idx(path, path, None, np.random.default_rng(0))

    def test_pixel_count_mismatch(self, tmp_path):
        img = tmp_path / "images.idx"
        img.write_bytes(struct.pack(">IIII", 0x803, 3, 2, 2) + bytes(11))  # one short
        lab = tmp_path / "labels.idx"
        lab.write_bytes(struct.pack(">II", 0x801, 3) + bytes(3))
        with pytest.raises(IdxFormatError, match="declares"):
            load_mnist_idx(img, lab, None, np.random.default_rng(0))

    def test_count_disagreement(self, tmp_path):
        images = np.zeros((3, 2, 2), dtype=np.uint8)
        labels = np.zeros(4, dtype=np.uint8)
        img, _ = write_idx_pair(tmp_path, images, labels[:3])
        lab = tmp_path / "labels4.idx"
        lab.write_bytes(struct.pack(">II", 0x801, 4) + labels.tobytes())
        with pytest.raises(IdxFormatError, match="differ"):
            load_mnist_idx(img, lab, None, np.random.default_rng(0))

    def test_missing_file(self, tmp_path):
        with pytest.raises(IdxFormatError, match="cannot read"):
            load_mnist_idx(tmp_path / "a.idx", tmp_path / "b.idx", None,
                           np.random.default_rng(0))

    def test_zero_examples(self, tmp_path):
        images = np.zeros((0, 2, 2), dtype=np.uint8)
        labels = np.zeros(0, dtype=np.uint8)
        img, lab = write_idx_pair(tmp_path, images, labels)
        with pytest.raises(IdxFormatError, match="zero"):
            load_mnist_idx(img, lab, None, np.random.default_rng(0))


class TestSplitAndWorkers:
    def test_split_sizes_and_coverage(self):
        feats = np.arange(100, dtype=np.float64)[:, None]
        data = LabeledDataset(feats, np.zeros(100, dtype=np.int64))
        train, test = split_train_test(data, 0.8, seed=3)
        assert len(train) == 80 and len(test) == 20
        ids = np.concatenate([train.features[:, 0], test.features[:, 0]])
        assert np.array_equal(np.sort(ids), np.arange(100.0))

    def test_split_rejects_empty_side(self):
        feats = np.zeros((5, 1))
        data = LabeledDataset(feats, np.zeros(5, dtype=np.int64))
        with pytest.raises(ValueError):
            split_train_test(data, 0.05, seed=3)
        with pytest.raises(ValueError):
            split_train_test(data, 0.99, seed=3)

    def test_build_workers_profiles(self):
        cfg = small_config(energy_budget_j=7.5)
        data = load_dataset(cfg, seed=cfg.seed)
        train, _ = split_train_test(data, cfg.train_fraction, cfg.seed)
        fleet = build_workers(cfg, train, seed=cfg.seed, trial=0)
        assert [p.worker_id for p in fleet] == list(range(4))
        assert sum(len(p.dataset) for p in fleet) == len(train)
        for p in fleet:
            assert cfg.distance_min_m <= p.distance_m <= cfg.distance_max_m
            assert p.remaining_energy_j == 7.5
            assert p.bounds.p_max_w == pytest.approx(cfg.p_max_w, rel=1e-15)

    def test_build_workers_trial_streams_differ(self):
        cfg = small_config()
        data = load_dataset(cfg, seed=cfg.seed)
        train, _ = split_train_test(data, cfg.train_fraction, cfg.seed)
        a = build_workers(cfg, train, seed=cfg.seed, trial=0)
        b = build_workers(cfg, train, seed=cfg.seed, trial=1)
        c = build_workers(cfg, train, seed=cfg.seed, trial=0)
        assert [p.distance_m for p in a] != [p.distance_m for p in b]
        assert [p.distance_m for p in a] == [p.distance_m for p in c]

    def test_noniid_partition_through_config(self):
        cfg = small_config(partition="noniid", classes_per_worker=2)
        data = load_dataset(cfg, seed=cfg.seed)
        train, _ = split_train_test(data, cfg.train_fraction, cfg.seed)
        fleet = build_workers(cfg, train, seed=cfg.seed, trial=0)
        for p in fleet:
            assert np.unique(p.dataset.labels).size == 2


class TestMetricsFiles:
    def run_small(self, tmp_path, **over):
        cfg = small_config(**over)
        return cfg, run_from_config(cfg, out_dir=tmp_path / "out", quiet=True)

    def test_headers_and_shape(self, tmp_path):
        cfg, (per_trial, paths) = self.run_small(tmp_path)
        glines = paths["global"].read_text().splitlines()
        wlines = paths["workers"].read_text().splitlines()
        assert glines[0] == GLOBAL_HEADER
        assert wlines[0] == WORKERS_HEADER
        assert len(glines) == 1 + cfg.rounds
        scheduled = sum(len(r.worker_stats) for r in per_trial[0])
        assert len(wlines) == 1 + scheduled
        assert [int(l.split(",")[0]) for l in glines[1:]] == [1, 2]

    def test_values_round_trip_through_repr(self, tmp_path):
        cfg, (per_trial, paths) = self.run_small(tmp_path)
        lines = paths["global"].read_text().splitlines()[1:]
        for rec, line in zip(per_trial[0], lines):
            cols = line.split(",")
            assert float(cols[1]) == rec.test_loss
            assert float(cols[2]) == rec.test_accuracy
            assert float(cols[3]) == rec.inst_energy_j
            assert float(cols[4]) == rec.cum_energy_j
            assert float(cols[5]) == rec.excluded_fraction

    def test_cumulative_energy_monotone(self, tmp_path):
        cfg, (_, paths) = self.run_small(tmp_path, rounds=4)
        cums = [float(l.split(",")[4]) for l in paths["global"].read_text().splitlines()[1:]]
        assert all(b >= a for a, b in zip(cums, cums[1:]))

    def test_manifest_echoes_config(self, tmp_path):
        cfg, (_, paths) = self.run_small(tmp_path)
        manifest = json.loads(paths["manifest"].read_text())
        assert manifest["version"] == feelsim.__version__
        assert manifest["seed"] == cfg.seed
        assert manifest["config"] == json.loads(json.dumps(cfg.as_dict()))

    def test_multi_trial_mean_and_by_trial_file(self, tmp_path):
        cfg, (per_trial, paths) = self.run_small(tmp_path, trials=2)
        assert len(per_trial) == 2
        assert "global_by_trial" in paths
        by_trial = paths["global_by_trial"].read_text().splitlines()
        assert by_trial[0] == "trial," + GLOBAL_HEADER
        assert len(by_trial) == 1 + 2 * cfg.rounds
        # the global file is the across-trial mean, row by row
        glines = paths["global"].read_text().splitlines()[1:]
        for i, line in enumerate(glines):
            want = np.mean([t[i].test_loss for t in per_trial])
            assert float(line.split(",")[1]) == pytest.approx(float(want), rel=1e-15)

    def test_single_trial_omits_by_trial_file(self, tmp_path):
        cfg, (_, paths) = self.run_small(tmp_path)
        assert "global_by_trial" not in paths
        assert not (paths["global"].parent / "global_by_trial.csv").exists()

    def test_byte_determinism(self, tmp_path):
        cfg = small_config()
        _, pa = run_from_config(cfg, out_dir=tmp_path / "a", quiet=True)
        _, pb = run_from_config(cfg, out_dir=tmp_path / "b", quiet=True)
        for name in ("global", "workers", "manifest"):
            assert pa[name].read_bytes() == pb[name].read_bytes()

    def test_seed_override_changes_results(self, tmp_path):
        cfg = small_config()
        _, pa = run_from_config(cfg, out_dir=tmp_path / "a", quiet=True)
        _, pb = run_from_config(cfg, seed=99, out_dir=tmp_path / "b", quiet=True)
        assert pa["global"].read_bytes() != pb["global"].read_bytes()
        assert json.loads(pb["manifest"].read_text())["seed"] == 99


class TestCli:
    def test_run_subcommand(self, tmp_path, capsys):
        cfg = small_config()
        cfg_path = tmp_path / "cfg.json"
        write_config(cfg, cfg_path)
        out_dir = tmp_path / "out"
        code = cli_main(["run", "--config", str(cfg_path), "--out", str(out_dir)])
        assert code == 0
        assert (out_dir / "global.csv").exists()
        assert (out_dir / "workers.csv").exists()
        assert (out_dir / "manifest.json").exists()
        printed = capsys.readouterr().out
        assert "global.csv" in printed

    def test_run_bad_config_exits_2(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text('{"rounds": 0}\n')
        code = cli_main(["run", "--config", str(cfg_path)])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_gen_data(self, tmp_path, capsys):
        out = tmp_path / "data.npz"
        code = cli_main(["gen-data", "--out", str(out), "--dim", "6", "--classes", "3",
                         "--samples", "90", "--spread", "0.4", "--seed", "11"])
        assert code == 0
        with np.load(out) as blob:
            want = generate_synthetic(6, 3, 90, 0.4, substream(11, DOMAIN_DATA))
            assert np.array_equal(blob["features"], want.features)
            assert np.array_equal(blob["labels"], want.labels)

    def test_gen_data_bad_args_exit_2(self, tmp_path, capsys):
        code = cli_main(["gen-data", "--out", str(tmp_path / "x.npz"), "--classes", "1"])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_unknown_flag_exits_2(self, capsys):
        assert cli_main(["run", "--bogus"]) == 2
        capsys.readouterr()

    def test_missing_subcommand_exits_2(self, capsys):
        assert cli_main([]) == 2
        capsys.readouterr()
