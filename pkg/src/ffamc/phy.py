"""Zero-forcing downlink, link abstraction and the oracle MCS labeler."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.special import erfc

from .channel import ChannelFrame, ConfigError, keyed_rng

SUPPORTED_M = (4, 16, 64, 256)
MCS_MIN, MCS_MAX = 10, 24
N_CLASSES = MCS_MAX - MCS_MIN + 1


class SingularChannelError(ArithmeticError):
    """The effective downlink channel is (numerically) rank deficient."""


@dataclass(frozen=True)
class McsEntry:
    index: int
    modulation_order: int
    code_rate: float

    @property
    def bits_per_symbol(self) -> int:
        return int(round(math.log2(self.modulation_order)))

    @property
    def spectral_efficiency(self) -> float:
        return self.bits_per_symbol * self.code_rate


@dataclass(frozen=True)
class McsTable:
    entries: tuple[McsEntry, ...]
    checksum: str = ""

    def __post_init__(self):
        idx = [e.index for e in self.entries]
        if len(self.entries) != N_CLASSES or idx != list(range(MCS_MIN, MCS_MAX + 1)):
            raise ConfigError(f"MCS table must hold indices {MCS_MIN}..{MCS_MAX}, got {idx}")
        for e in self.entries:
            if e.modulation_order not in SUPPORTED_M:
                raise ConfigError(f"unsupported modulation order {e.modulation_order}")
            if not 0.11 <= e.code_rate <= 0.92:
                raise ConfigError(f"code rate {e.code_rate} outside [0.11, 0.92]")
        se = [e.spectral_efficiency for e in self.entries]
        if any(b <= a for a, b in zip(se, se[1:])):
            raise ConfigError("spectral efficiency must increase strictly with index")

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, mcs_index: int) -> McsEntry:
        return self.entries[mcs_index - MCS_MIN]


def load_mcs_table(path=None) -> McsTable:
    """Read the 15-row MCS table (bundled copy unless ``path`` is given)."""
    if path is None:
        raw = resources.files("ffamc.resources").joinpath("mcs_table2.csv").read_bytes()
    else:
        with open(path, "rb") as fh:
            raw = fh.read()
    rows = list(csv.DictReader(raw.decode("utf-8").splitlines()))
    entries = tuple(
        McsEntry(int(r["index"]), int(r["modulation_order"]), float(r["code_rate"])) for r in rows
    )
    return McsTable(entries, hashlib.sha256(raw).hexdigest())


@dataclass(frozen=True)
class LinkConfig:
    tx_power: float = 1.0
    noise_power: float = 1.0
    ber_threshold: float = 1e-3
    coding_gain_coeff_db: float = 3.0

    def __post_init__(self):
        if self.tx_power <= 0 or self.noise_power <= 0:
            raise ConfigError("tx_power and noise_power must be > 0")
        if not 0 < self.ber_threshold < 0.5:
            raise ConfigError("ber_threshold must lie in (0, 0.5)")


# ---------------------------------------------------------------------------
# Precoding


def _downlink(frame) -> np.ndarray:
    h = frame.h if isinstance(frame, ChannelFrame) else np.asarray(frame, dtype=complex)
    return h.T  # n_ue x n_bs


def zf_precoder(frame) -> np.ndarray:
    """Unnormalized zero-forcing precoder ``G^H (G G^H)^-1`` with ``G = H^T``."""
    g = _downlink(frame)
    s = np.linalg.svd(g, compute_uv=False)
    if g.shape[0] > g.shape[1] or s[-1] <= 1e-12 * s[0]:
        raise SingularChannelError("downlink channel is rank deficient")
    gram = g @ g.conj().T
    return g.conj().T @ np.linalg.solve(gram, np.eye(g.shape[0]))


def post_zf_sinr(frame, link: LinkConfig) -> np.ndarray:
    """Per-user SINR with equal power and column-normalized ZF beams.

    Interference is nulled exactly, so SINR_k = P / (n_ue sigma^2 ||w0_k||^2).
    """
    w0 = zf_precoder(frame)
    col_power = np.sum(np.abs(w0) ** 2, axis=0)
    n_ue = w0.shape[1]
    return link.tx_power / (n_ue * link.noise_power * col_power)


def single_user_snr(frame, link: LinkConfig) -> np.ndarray:
    """Per-user SNR ignoring the other co-scheduled users (matched filter)."""
    h = frame.h if isinstance(frame, ChannelFrame) else np.asarray(frame, dtype=complex)
    n_ue = h.shape[1]
    return link.tx_power * np.sum(np.abs(h) ** 2, axis=0) / (n_ue * link.noise_power)


# ---------------------------------------------------------------------------
# Bit error rates


def qfunc(x):
    return 0.5 * erfc(np.asarray(x, dtype=float) / math.sqrt(2.0))


def _check_m(m: int) -> None:
    if m not in SUPPORTED_M:
        raise ValueError(f"modulation order must be one of {SUPPORTED_M}, got {m}")


def qam_ber_approx(snr, modulation_order: int):
    """Nearest-neighbour Gray square-QAM approximation.

    (4/log2 M)(1 - 1/sqrt M) Q(sqrt(3 snr / (M - 1))), clamped to [0, 0.5].
    Tight at high SNR, optimistic at low SNR for M >= 16.
    """
    _check_m(modulation_order)
    m = modulation_order
    snr = np.asarray(snr, dtype=float)
    pb = (4 / math.log2(m)) * (1 - 1 / math.sqrt(m)) * qfunc(np.sqrt(3 * snr / (m - 1)))
    return np.clip(pb, 0.0, 0.5)


def _gray(n):
    return n ^ (n >> 1)


def _pam_error_weights(levels: int) -> np.ndarray:
    """Bit-distance matrix between Gray labels of a ``levels``-PAM alphabet."""
    g = np.array([_gray(i) for i in range(levels)])
    x = g[:, None] ^ g[None, :]
    return np.array([[bin(v).count("1") for v in row] for row in x], dtype=float)


def qam_ber_uncoded(snr, modulation_order: int):
    """Exact bit error probability of Gray-mapped square M-QAM in AWGN.

    ``snr`` is the per-symbol Es/N0 (linear).  The I and Q rails are
    independent Gray-coded sqrt(M)-PAM alphabets, so the BER is the
    decision-region sum over one rail.  Reduces to
    :func:`qam_ber_approx` at high SNR and is exact everywhere for QPSK.
    """
    _check_m(modulation_order)
    m = modulation_order
    levels = int(round(math.sqrt(m)))
    bits = int(round(math.log2(levels)))
    snr = np.asarray(snr, dtype=float)
    scalar = snr.ndim == 0
    snr = np.atleast_1d(snr)

    # unit-energy QAM: half-distance d with Es = 2 (M - 1) d^2 / 3
    # per-rail noise variance N0 / 2 = 1 / (2 snr)
    with np.errstate(divide="ignore"):
        d_over_sigma = np.sqrt(3 * snr / (m - 1))
    weights = _pam_error_weights(levels)
    # region j for level a spans [(2(j-a)-1) d, (2(j-a)+1) d] around the point,
    # open-ended at the outer levels
    total = np.zeros_like(snr)
    for a in range(levels):
        for j in range(levels):
            if weights[a, j] == 0:
                continue
            off = j - a
            lo = (2 * off - 1) if j > 0 else -np.inf
            hi = (2 * off + 1) if j < levels - 1 else np.inf
            # P(lo*d < n < hi*d), n ~ N(0, sigma^2), written with Q tails
            if off > 0:
                p = qfunc(lo * d_over_sigma) - (qfunc(hi * d_over_sigma) if np.isfinite(hi) else 0.0)
            else:
                p = qfunc(-hi * d_over_sigma) - (qfunc(-lo * d_over_sigma) if np.isfinite(lo) else 0.0)
            total = total + weights[a, j] * p
    pb = np.clip(total / (levels * bits), 0.0, 0.5)
    return float(pb[0]) if scalar else pb


def _qam_points(levels: int):
    amp = 2 * np.arange(levels) - (levels - 1)  # PAM amplitudes, natural order
    gray = np.array([_gray(i) for i in range(levels)])
    # bit pattern -> amplitude: Gray label g sits at position i
    label_to_pos = np.empty(levels, dtype=int)
    label_to_pos[gray] = np.arange(levels)
    return amp, gray, label_to_pos


def monte_carlo_ber_stats(snr: float, modulation_order: int, n_bits: int, seed: int = 0,
                          block_bits: int = 1 << 20) -> tuple[float, float]:
    """Simulated Gray square-QAM BER and its Monte-Carlo standard error.

    The standard error is taken over per-symbol error counts, which keeps
    it honest when one symbol error flips several bits.  Blocks are drawn
    from independent keyed streams and summed in block order.
    """
    _check_m(modulation_order)
    m = modulation_order
    k = int(round(math.log2(m)))
    if n_bits < 10_000 or n_bits % k:
        raise ValueError("n_bits must be >= 1e4 and a multiple of log2(M)")
    levels = int(round(math.sqrt(m)))
    kr = k // 2
    amp, gray, label_to_pos = _qam_points(levels)
    scale = math.sqrt(3 / (2 * (m - 1)))  # unit average symbol energy
    sigma = math.sqrt(1 / (2 * snr)) if snr > 0 else math.inf

    n_sym = n_bits // k
    per_block = max(1, block_bits // k)
    err_sum = 0.0
    err_sq = 0.0
    done, block = 0, 0
    while done < n_sym:
        ns = min(per_block, n_sym - done)
        rng = keyed_rng(seed, block)
        labels = rng.integers(0, levels, size=(ns, 2))
        noise = rng.standard_normal((ns, 2))
        tx = amp[label_to_pos[labels]] * scale
        if math.isinf(sigma):
            rx_pos = rng.integers(0, levels, size=(ns, 2))
        else:
            rx = tx + sigma * noise
            rx_pos = np.clip(np.rint((rx / scale + (levels - 1)) / 2), 0, levels - 1).astype(int)
        diff = gray[rx_pos] ^ labels
        errs = np.zeros(ns)
        for b in range(kr):
            errs += ((diff >> b) & 1).sum(axis=1)
        err_sum += errs.sum()
        err_sq += (errs * errs).sum()
        done += ns
        block += 1
    mean_sym = err_sum / n_sym
    var_sym = max(err_sq / n_sym - mean_sym**2, 0.0)
    return mean_sym / k, math.sqrt(var_sym / n_sym) / k


def monte_carlo_ber(snr: float, modulation_order: int, n_bits: int, seed: int = 0) -> float:
    return monte_carlo_ber_stats(snr, modulation_order, n_bits, seed)[0]


def effective_snr_db(sinr, code_rate: float, link: LinkConfig):
    return 10 * np.log10(sinr) + link.coding_gain_coeff_db * math.log2(1 / code_rate)


def coded_ber(sinr, mcs: McsEntry, link: LinkConfig):
    """Post-decoding BER proxy: uncoded QAM BER after a code-rate SNR bonus."""
    sinr = np.asarray(sinr, dtype=float)
    if np.any(sinr <= 0):
        raise ValueError("sinr must be > 0")
    eff = effective_snr_db(sinr, mcs.code_rate, link)
    return qam_ber_uncoded(10 ** (eff / 10), mcs.modulation_order)


def oracle_mcs(sinr, table: McsTable, link: LinkConfig):
    """Largest MCS index whose coded BER meets the threshold, floor 10.

    Accepts a scalar or an array of SINRs (linear).
    """
    s = np.asarray(sinr, dtype=float)
    scalar = s.ndim == 0
    s = np.atleast_1d(s)
    labels = np.full(s.shape, MCS_MIN, dtype=int)
    for e in table.entries:
        ok = np.asarray(coded_ber(s, e, link)) <= link.ber_threshold
        labels = np.where(ok, e.index, labels)
    return int(labels[0]) if scalar else labels


def label_frame(frame, table: McsTable, link: LinkConfig) -> list[int]:
    return [int(v) for v in oracle_mcs(post_zf_sinr(frame, link), table, link)]


def sinr_thresholds_db(table: McsTable, link: LinkConfig, lo_db: float = -60.0, hi_db: float = 80.0,
                       tol_db: float = 1e-9) -> np.ndarray:
    """Smallest SINR (dB) at which each entry meets the BER threshold.

    Found by bisection on the strictly decreasing coded BER; entry ``i`` of
    the result belongs to MCS index ``MCS_MIN + i``.
    """
    out = np.empty(len(table))
    for i, e in enumerate(table.entries):
        a, b = lo_db, hi_db
        while b - a > tol_db:
            mid = 0.5 * (a + b)
            if coded_ber(10 ** (mid / 10), e, link) <= link.ber_threshold:
                b = mid
            else:
                a = mid
        out[i] = b
    return out
