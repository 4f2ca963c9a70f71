"""Dataset generation, the AMCD container, splits and label histograms.

An AMCD file is little-endian: magic ``AMCD``, version u16, a u32
length-prefixed UTF-8 JSON manifest, a u64 record count, then fixed-size
records of scenario id u16, frame index u32, user id u8, label u8 (raw MCS
index), sinr_db f32 and the float32 sample tensor of shape
``(T, 2, n_bs, n_ue)``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .channel import ConfigError, ScenarioConfig, gen_sequence, keyed_rng
from .models import SampleSet, normalize_sample
from .phy import (
    MCS_MAX,
    MCS_MIN,
    N_CLASSES,
    LinkConfig,
    McsTable,
    SingularChannelError,
    load_mcs_table,
    oracle_mcs,
    post_zf_sinr,
)

MAGIC = b"AMCD"
VERSION = 1
MOBILE_SPEED_MPS = 2.8
STATIC_MODES = ("uncorrelated", "one_cluster", "two_clusters", "random_placement")


class DataError(ValueError):
    """Malformed, inconsistent or unusable dataset."""


def record_dtype(t_len: int, n_bs: int, n_ue: int) -> np.dtype:
    return np.dtype([
        ("scenario", "<u2"),
        ("frame", "<u4"),
        ("user", "u1"),
        ("label", "u1"),
        ("sinr_db", "<f4"),
        ("x", "<f4", (t_len, 2, n_bs, n_ue)),
    ])


def default_catalog(master_seed: int = 0, n_bs: int = 32, n_ue: int = 4, **overrides) -> list[ScenarioConfig]:
    """The twelve evaluation scenarios.

    {los, nlos} x {four static placements, mobile co-located, mobile random}.
    Each scenario gets its own seed derived from ``master_seed``.
    """
    shapes = [(m, "static", 0.0) for m in STATIC_MODES]
    shapes += [("one_cluster", "mobile", MOBILE_SPEED_MPS), ("random_placement", "mobile", MOBILE_SPEED_MPS)]
    out = []
    for prop in ("los", "nlos"):
        for mode, mobility, speed in shapes:
            sid = len(out)
            seed = int(np.random.SeedSequence(int(master_seed), spawn_key=(3, sid)).generate_state(1, np.uint64)[0])
            out.append(ScenarioConfig(propagation=prop, mode=mode, mobility=mobility, speed_mps=speed,
                                      master_seed=seed, n_bs=n_bs, n_ue=n_ue, **overrides))
    return out


@dataclass
class DatasetManifest:
    format_version: int
    scenarios: list  # dicts: tag, config, first_frame, n_frames, n_samples, skipped_frames
    n_bs: int
    n_ue: int
    t_len: int
    noise_power: float
    tx_power: float
    coding_gain_coeff_db: float
    ber_threshold: float
    mcs_checksum: str
    total_samples: int
    source: str = "simulation"
    extra: dict = field(default_factory=dict)

    @property
    def tags(self) -> tuple:
        return tuple(s["tag"] for s in self.scenarios)

    def link(self) -> LinkConfig:
        return LinkConfig(self.tx_power, self.noise_power, self.ber_threshold, self.coding_gain_coeff_db)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))


@dataclass
class Dataset:
    manifest: DatasetManifest
    records: np.ndarray  # structured, see record_dtype

    def __len__(self):
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return self.records["label"].astype(int)

    @property
    def scenario_ids(self) -> np.ndarray:
        return self.records["scenario"].astype(int)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.manifest, self.records[np.asarray(idx, dtype=int)])

    def to_samples(self, idx=None) -> SampleSet:
        r = self.records if idx is None else self.records[np.asarray(idx, dtype=int)]
        return SampleSet(
            x=r["x"].astype(np.float64),
            y=r["label"].astype(int) - MCS_MIN,
            user=r["user"].astype(int),
            scenario=r["scenario"].astype(int),
            frame=r["frame"].astype(int),
            sinr_db=r["sinr_db"].astype(np.float64),
            scenario_tags=self.manifest.tags,
        )

    def checksum(self, idx=None) -> str:
        r = self.records if idx is None else self.records[np.asarray(idx, dtype=int)]
        return hashlib.sha256(np.ascontiguousarray(r).tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# Generation


def label_from_db(sinr_db, table: McsTable, link: LinkConfig) -> np.ndarray:
    """Oracle labels computed from float32-stored SINR, so a reload re-derives them exactly."""
    db = np.asarray(sinr_db, dtype=np.float32).astype(np.float64)
    return np.atleast_1d(oracle_mcs(10.0 ** (db / 10.0), table, link))


def _scenario_records(args) -> tuple[np.ndarray, int]:
    sid, cfg, n_frames, first_frame, t_len, link, table = args
    frames = gen_sequence(cfg, n_frames, first_frame)
    dt = record_dtype(t_len, cfg.n_bs, cfg.n_ue)
    sinr = []
    skipped = 0
    for f in frames:
        try:
            sinr.append(post_zf_sinr(f, link))
        except SingularChannelError:
            sinr.append(None)
            skipped += 1
    rows = []
    for end in range(t_len - 1, n_frames):
        s = sinr[end]
        if s is None:
            continue
        window = frames[end - t_len + 1 : end + 1]
        db = (10 * np.log10(s)).astype(np.float32)
        labels = label_from_db(db, table, link)
        for k in range(cfg.n_ue):
            rec = np.zeros((), dtype=dt)
            rec["scenario"] = sid
            rec["frame"] = frames[end].frame_index
            rec["user"] = k
            rec["label"] = labels[k]
            rec["sinr_db"] = db[k]
            rec["x"] = normalize_sample(window, t_len, target_user=k).astype(np.float32)
            rows.append(rec)
    return np.array(rows, dtype=dt), skipped


def generate_dataset(catalog, frames_per_scenario: int, link: LinkConfig, t_len: int = 3,
                     table: McsTable | None = None, threads: int = 1, first_frame: int = 0) -> Dataset:
    """Simulate every scenario and emit one sample per (user, window of ``t_len`` frames).

    Windows overlap with stride one.  A window whose final frame has a
    rank-deficient channel is dropped; the frame is counted as skipped.
    Output order is (scenario, frame, user) whatever ``threads`` is.
    """
    catalog = list(catalog)
    if not catalog:
        raise ConfigError("scenario catalog is empty")
    if t_len < 1 or frames_per_scenario < t_len:
        raise ConfigError(f"frames per scenario ({frames_per_scenario}) must be >= T ({t_len})")
    n_bs, n_ue = catalog[0].n_bs, catalog[0].n_ue
    if any(c.n_bs != n_bs or c.n_ue != n_ue for c in catalog):
        raise ConfigError("all scenarios must share n_bs and n_ue")
    if len(catalog) > 0xFFFF or n_ue > 0xFF:
        raise ConfigError("too many scenarios or users for the AMCD record layout")
    table = table or load_mcs_table()
    jobs = [(sid, cfg, frames_per_scenario, first_frame, t_len, link, table) for sid, cfg in enumerate(catalog)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            results = list(pool.map(_scenario_records, jobs))
    else:
        results = [_scenario_records(j) for j in jobs]

    scen = []
    for cfg, (recs, skipped) in zip(catalog, results):
        scen.append({
            "tag": cfg.tag,
            "config": asdict(cfg),
            "first_frame": first_frame,
            "n_frames": frames_per_scenario,
            "n_samples": len(recs),
            "skipped_frames": skipped,
        })
    records = np.concatenate([r for r, _ in results]) if results else np.zeros(0, record_dtype(t_len, n_bs, n_ue))
    manifest = DatasetManifest(
        format_version=VERSION, scenarios=scen, n_bs=n_bs, n_ue=n_ue, t_len=t_len,
        noise_power=link.noise_power, tx_power=link.tx_power,
        coding_gain_coeff_db=link.coding_gain_coeff_db, ber_threshold=link.ber_threshold,
        mcs_checksum=table.checksum, total_samples=len(records),
    )
    return Dataset(manifest, records)


def calibrate_noise_power(catalog, frames: int, target_db: float, link: LinkConfig | None = None) -> float:
    """Noise power that puts the median post-ZF SINR of ``catalog`` at ``target_db``."""
    link = link or LinkConfig()
    unit = LinkConfig(link.tx_power, 1.0, link.ber_threshold, link.coding_gain_coeff_db)
    vals = []
    for cfg in catalog:
        for f in gen_sequence(cfg, frames):
            try:
                vals.extend(10 * np.log10(post_zf_sinr(f, unit)))
            except SingularChannelError:
                continue
    if not vals:
        raise DataError("no usable frames for calibration")
    return float(10 ** ((np.median(vals) - target_db) / 10))


# ---------------------------------------------------------------------------
# Container


def encode_dataset(ds: Dataset) -> bytes:
    m = ds.manifest
    if m.total_samples != len(ds.records):
        raise DataError("manifest count does not match the records")
    text = m.to_json().encode("utf-8")
    head = MAGIC + struct.pack("<HI", VERSION, len(text)) + text + struct.pack("<Q", len(ds.records))
    recs = np.ascontiguousarray(ds.records, dtype=record_dtype(m.t_len, m.n_bs, m.n_ue))
    return head + recs.tobytes()


def decode_dataset(buf: bytes, verify: bool = True, table: McsTable | None = None) -> Dataset:
    if buf[:4] != MAGIC:
        raise DataError("not an AMCD dataset")
    version, mlen = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise DataError(f"unsupported AMCD version {version}")
    pos = 10
    try:
        manifest = DatasetManifest.from_json(buf[pos : pos + mlen].decode("utf-8"))
    except (ValueError, TypeError) as exc:
        raise DataError(f"bad manifest: {exc}") from exc
    pos += mlen
    (count,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    dt = record_dtype(manifest.t_len, manifest.n_bs, manifest.n_ue)
    if len(buf) - pos != count * dt.itemsize:
        raise DataError("record payload size does not match the record count")
    if count != manifest.total_samples:
        raise DataError("record count does not match the manifest")
    records = np.frombuffer(buf, dtype=dt, count=count, offset=pos).copy()
    ds = Dataset(manifest, records)
    if verify:
        verify_dataset(ds, table)
    return ds


def verify_dataset(ds: Dataset, table: McsTable | None = None) -> None:
    """Check manifest consistency and re-derive every label from its stored SINR."""
    table = table or load_mcs_table()
    m = ds.manifest
    if m.mcs_checksum != table.checksum:
        raise DataError("dataset was labeled with a different MCS table")
    if sum(s["n_samples"] for s in m.scenarios) != len(ds):
        raise DataError("per-scenario counts do not sum to the record count")
    if len(ds) == 0:
        return
    lab = ds.labels
    if lab.min() < MCS_MIN or lab.max() > MCS_MAX:
        raise DataError("label outside the MCS range")
    if np.any(ds.scenario_ids >= len(m.scenarios)):
        raise DataError("record refers to an unknown scenario")
    if not np.all(np.isfinite(ds.records["sinr_db"])) or not np.all(np.isfinite(ds.records["x"])):
        raise DataError("non-finite SINR or tensor values")
    again = label_from_db(ds.records["sinr_db"], table, m.link())
    bad = int(np.sum(again != lab))
    if bad:
        raise DataError(f"{bad} stored labels disagree with labels re-derived from SINR")


def write_dataset(path, ds: Dataset) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_dataset(ds))


def read_dataset(path, verify: bool = True) -> Dataset:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read(), verify=verify)


# ---------------------------------------------------------------------------
# Splits and histograms


def split_dataset(ds: Dataset, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Scenario-stratified train/test index split.

    Each scenario contributes its share by largest-remainder rounding so the
    overall train size is ``round(train_fraction * N)``.
    """
    if not 0 < train_fraction < 1:
        raise ConfigError("train_fraction must lie strictly between 0 and 1")
    sid = ds.scenario_ids
    groups = [np.flatnonzero(sid == s) for s in range(len(ds.manifest.scenarios))]
    want = [train_fraction * len(g) for g in groups]
    n_train = [int(math.floor(w)) for w in want]
    short = int(round(train_fraction * len(ds))) - sum(n_train)
    order = sorted(range(len(groups)), key=lambda i: (-(want[i] - n_train[i]), i))
    for i in order[:max(short, 0)]:
        n_train[i] += 1
    train, test = [], []
    for s, g in enumerate(groups):
        perm = g[keyed_rng(seed, 11, s).permutation(len(g))]
        train.append(perm[: n_train[s]])
        test.append(perm[n_train[s]:])
    train = np.sort(np.concatenate(train)) if train else np.zeros(0, int)
    test = np.sort(np.concatenate(test)) if test else np.zeros(0, int)
    if len(train) == 0 or len(test) == 0:
        raise ConfigError("split leaves an empty train or test side")
    return train, test


def match_scenarios(ds: Dataset, pattern: str | None) -> np.ndarray:
    """Scenario ids whose tag equals ``pattern`` or contains it as a ``_``-separated part."""
    tags = ds.manifest.tags
    if pattern in (None, "", "all"):
        return np.arange(len(tags))
    hits = [i for i, t in enumerate(tags) if t == pattern or f"_{pattern}_" in f"_{t}_"]
    return np.array(hits, dtype=int)


def label_histogram(ds: Dataset, scenario: str | None = None) -> np.ndarray:
    """Counts per MCS index 10..24 over the samples of the matching scenarios."""
    keep = np.isin(ds.scenario_ids, match_scenarios(ds, scenario))
    return np.bincount(ds.labels[keep] - MCS_MIN, minlength=N_CLASSES)


def write_histogram_csv(path, counts) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mcs", "count"])
        for i, c in enumerate(counts):
            w.writerow([MCS_MIN + i, int(c)])
