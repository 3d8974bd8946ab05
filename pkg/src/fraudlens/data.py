"""Tabular transaction ingest, delta feature engineering, and synthetic data.

The CSV wire format is fixed: UTF-8, comma-separated, header row exactly

    Transaction_Id,Sender_Id,Sender_Account,Sender_Country,Sender_Sector,
    Sender_lob,Bene_Id,Bene_Account,Bene_Country,USD_Amount,Timestamp,
    Label,Transaction_Type

(one line). Empty string denotes an absent optional. Sector and Lob carry
no signal for this task and are accepted but always discarded at ingest.
"""

from __future__ import annotations

import csv
import io
import statistics
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DatasetError, RowError, SchemaError

__all__ = [
    "TransactionRecord",
    "TRANSACTION_TYPES",
    "CSV_HEADER",
    "SchemaOptions",
    "parse_transactions",
    "write_transactions",
    "transactions_to_csv",
    "engineer_deltas",
    "GenConfig",
    "generate_synthetic",
]

TRANSACTION_TYPES = (
    "MAKE-PAYMENT",
    "WITHDRAWAL",
    "MOVE-FUNDS",
    "DEPOSIT-CASH",
    "PAY-CHECK",
    "QUICK-PAYMENT",
    "EXCHANGE",
)

CSV_HEADER = [
    "Transaction_Id", "Sender_Id", "Sender_Account", "Sender_Country",
    "Sender_Sector", "Sender_lob", "Bene_Id", "Bene_Account", "Bene_Country",
    "USD_Amount", "Timestamp", "Label", "Transaction_Type",
]

# Sector/Lob are parsed-and-dropped; everything else must be present.
_REQUIRED_COLUMNS = [c for c in CSV_HEADER if c not in ("Sender_Sector", "Sender_lob")]


@dataclass(frozen=True)
class TransactionRecord:
    transaction_id: str
    sender_id: str | None
    sender_account: str | None
    sender_country: str | None
    bene_id: str | None
    bene_account: str | None
    bene_country: str | None
    usd_amount: float
    transaction_type: str
    timestamp: int
    label: int
    d_amount: float | None = None
    d_time: float | None = None

    @property
    def delta_account(self) -> str | None:
        """Account the deltas attach to: sender account, else beneficiary."""
        return self.sender_account if self.sender_account else self.bene_account


@dataclass(frozen=True)
class SchemaOptions:
    allow_extra_columns: bool = False


def _opt(cell: str | None) -> str | None:
    cell = (cell or "").strip()
    return cell if cell else None


def parse_transactions(source, schema_options: SchemaOptions | None = None) -> list[TransactionRecord]:
    """Parse the CSV wire format into records.

    ``source`` is a path or an open text stream. Raises SchemaError for a
    missing required column, RowError (with the 1-based data row index) for
    an unparseable amount/timestamp/label, and DatasetError for duplicated
    transaction ids.
    """
    opts = schema_options or SchemaOptions()
    if hasattr(source, "read"):
        return _parse_stream(source, opts)
    with open(source, "r", encoding="utf-8", newline="") as fh:
        return _parse_stream(fh, opts)


def _parse_stream(fh, opts: SchemaOptions) -> list[TransactionRecord]:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty CSV: no header row") from None
    header = [h.strip() for h in header]
    missing = [c for c in _REQUIRED_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")
    if not opts.allow_extra_columns:
        extra = [c for c in header if c not in CSV_HEADER]
        if extra:
            raise SchemaError(f"unexpected column(s): {', '.join(extra)}")
    col = {name: header.index(name) for name in header}

    records: list[TransactionRecord] = []
    seen: set[str] = set()
    for idx, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise RowError(f"row {idx}: expected {len(header)} cells, got {len(row)}")

        def cell(name: str) -> str | None:
            return _opt(row[col[name]]) if name in col else None

        tid = cell("Transaction_Id")
        if not tid:
            raise RowError(f"row {idx}: empty Transaction_Id")
        if tid in seen:
            raise DatasetError(f"duplicate transaction id: {tid}")
        seen.add(tid)
        try:
            amount = float(row[col["USD_Amount"]])
        except ValueError:
            raise RowError(f"row {idx}: unparseable USD_Amount {row[col['USD_Amount']]!r}") from None
        if amount < 0:
            raise RowError(f"row {idx}: negative USD_Amount")
        try:
            ts = int(row[col["Timestamp"]])
        except ValueError:
            raise RowError(f"row {idx}: unparseable Timestamp {row[col['Timestamp']]!r}") from None
        label_raw = row[col["Label"]].strip()
        if label_raw not in ("0", "1"):
            raise RowError(f"row {idx}: label must be 0 or 1, got {label_raw!r}")
        ttype = (cell("Transaction_Type") or "").upper()
        if ttype not in TRANSACTION_TYPES:
            raise RowError(f"row {idx}: unknown Transaction_Type {ttype!r}")
        records.append(TransactionRecord(
            transaction_id=tid,
            sender_id=cell("Sender_Id"),
            sender_account=cell("Sender_Account"),
            sender_country=cell("Sender_Country"),
            bene_id=cell("Bene_Id"),
            bene_account=cell("Bene_Account"),
            bene_country=cell("Bene_Country"),
            usd_amount=amount,
            transaction_type=ttype,
            timestamp=ts,
            label=int(label_raw),
        ))
    return records


def _format_row(r: TransactionRecord, sector: str = "", lob: str = "") -> list[str]:
    return [
        r.transaction_id,
        r.sender_id or "",
        r.sender_account or "",
        r.sender_country or "",
        sector,
        lob,
        r.bene_id or "",
        r.bene_account or "",
        r.bene_country or "",
        f"{r.usd_amount:.2f}",
        str(r.timestamp),
        str(r.label),
        r.transaction_type,
    ]


def transactions_to_csv(records: Iterable[TransactionRecord],
                        sectors: dict[str, tuple[str, str]] | None = None) -> str:
    """Serialize records to the wire format; ``sectors`` optionally maps
    transaction id to (Sector, Lob) cosmetic values."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        sector, lob = (sectors or {}).get(r.transaction_id, ("", ""))
        writer.writerow(_format_row(r, sector, lob))
    return buf.getvalue()


def write_transactions(records: Iterable[TransactionRecord], path,
                       sectors: dict[str, tuple[str, str]] | None = None) -> None:
    Path(path).write_text(transactions_to_csv(records, sectors), encoding="utf-8")


def engineer_deltas(records: Sequence[TransactionRecord]) -> list[TransactionRecord]:
    """Populate d_time / d_amount between consecutive transactions per account.

    For each participating account (sender account when present, otherwise
    beneficiary account), records are ordered by (timestamp, transaction id)
    and each one receives the difference in timestamp and amount versus its
    predecessor. First transactions of an account take the dataset-median
    delta for both fields so that onset alone never looks like a burst.
    Output order matches input order regardless of input permutation.
    """
    by_account: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        acct = r.delta_account
        if acct is not None:
            by_account.setdefault(acct, []).append(i)

    d_time: dict[int, float] = {}
    d_amount: dict[int, float] = {}
    for acct, idxs in by_account.items():
        idxs.sort(key=lambda i: (records[i].timestamp, records[i].transaction_id))
        for prev_i, cur_i in zip(idxs, idxs[1:]):
            d_time[cur_i] = float(records[cur_i].timestamp - records[prev_i].timestamp)
            d_amount[cur_i] = records[cur_i].usd_amount - records[prev_i].usd_amount

    median_dt = statistics.median(d_time.values()) if d_time else 0.0
    median_da = statistics.median(d_amount.values()) if d_amount else 0.0

    return [
        replace(r, d_time=d_time.get(i, median_dt), d_amount=d_amount.get(i, median_da))
        for i, r in enumerate(records)
    ]


COMMON_COUNTRIES = ("USA", "GERMANY", "CANADA", "FRANCE", "UK", "JAPAN")
RARE_COUNTRIES = ("GABON", "NORTHERN-MARIANA-ISLANDS", "ANGUILLA", "VANUATU", "COMOROS")


@dataclass(frozen=True)
class GenConfig:
    """Knobs for the synthetic transaction generator.

    Background traffic mimics ordinary consumer payments; fraud episodes
    plant the account-takeover motif: a short burst of quick payments from
    a victim account (starting with a small test payment, some aimed at
    accounts in rare countries) followed by a withdrawal through another
    account of the same client.
    """

    n_transactions: int = 10_000
    fraud_rate: float = 0.02
    n_clients: int = 400
    n_accounts_per_client: int = 2
    countries: tuple[str, ...] = COMMON_COUNTRIES
    rare_countries: tuple[str, ...] = RARE_COUNTRIES
    test_payment_range: tuple[float, float] = (1.0, 15.0)
    burst_length: int = 4
    burst_theta_seconds: float = 120.0
    withdrawal_followup: bool = True
    rare_country_rate: float = 0.7
    mean_gap_seconds: float = 30.0
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.fraud_rate < 1.0:
            raise ConfigError("fraud_rate must be in (0, 1)")
        if self.burst_length < 2:
            raise ConfigError("burst_length must be >= 2")
        if self.burst_theta_seconds <= 0:
            raise ConfigError("burst_theta_seconds must be positive")
        if self.n_clients < 2 or self.n_accounts_per_client < 1:
            raise ConfigError("need at least 2 clients and 1 account per client")
        labeled = self.burst_length + (1 if self.withdrawal_followup else 0)
        if labeled > self.n_transactions:
            raise ConfigError("burst does not fit into n_transactions")
        episodes = round(self.n_transactions * self.fraud_rate / labeled)
        if episodes * labeled >= self.n_transactions:
            raise ConfigError("fraud episodes leave no room for background traffic")


def generate_synthetic(config: GenConfig) -> list[TransactionRecord]:
    """Generate a labeled dataset, deterministic per seed, sorted by time."""
    config.validate()
    rng = np.random.default_rng(config.seed)

    labeled_per_episode = config.burst_length + (1 if config.withdrawal_followup else 0)
    n_episodes = round(config.n_transactions * config.fraud_rate / labeled_per_episode)
    n_background = config.n_transactions - n_episodes * labeled_per_episode

    clients = [f"CLIENT-{1000 + i}" for i in range(config.n_clients)]
    companies = [f"COMPANY-{5000 + i}" for i in range(max(4, config.n_clients // 5))]
    accounts = {c: [f"ACCOUNT-{2000 + i * config.n_accounts_per_client + k}"
                    for k in range(config.n_accounts_per_client)]
                for i, c in enumerate(clients)}

    def party_country(name: str) -> str:
        # crc32 keeps the country assignment stable across processes, unlike
        # the builtin string hash.
        h = np.random.default_rng(zlib.crc32(f"{config.seed}|{name}".encode()))
        if h.random() < 0.02:
            return config.rare_countries[int(h.integers(len(config.rare_countries)))]
        return config.countries[int(h.integers(len(config.countries)))]

    horizon = config.n_transactions * config.mean_gap_seconds
    counter = 0

    def next_id(prefix: str) -> str:
        nonlocal counter
        counter += 1
        return f"{prefix}-{100000 + counter}"

    rows: list[TransactionRecord] = []

    def emit(prefix, ttype, ts, amount, label, sender=None, sender_acct=None, bene=None, bene_acct=None):
        rows.append(TransactionRecord(
            transaction_id=next_id(prefix),
            sender_id=sender,
            sender_account=sender_acct,
            sender_country=party_country(sender) if sender else None,
            bene_id=bene,
            bene_account=bene_acct,
            bene_country=party_country(bene) if bene else None,
            usd_amount=round(float(amount), 2),
            transaction_type=ttype,
            timestamp=int(ts),
            label=label,
        ))

    background_kinds = (
        ("MAKE-PAYMENT", "PAY-BILL", 0.30),
        ("QUICK-PAYMENT", "QUICK-PAYMENT", 0.18),
        ("MOVE-FUNDS", "MOVE-FUNDS", 0.15),
        ("PAY-CHECK", "PAY-CHECK", 0.12),
        ("DEPOSIT-CASH", "QUICK-DEPOSIT", 0.12),
        ("WITHDRAWAL", "WITHDRAWAL", 0.10),
        ("EXCHANGE", "EXCHANGE", 0.03),
    )
    kind_p = np.array([w for _, _, w in background_kinds])
    kind_p = kind_p / kind_p.sum()

    for _ in range(n_background):
        ttype, prefix, _ = background_kinds[int(rng.choice(len(background_kinds), p=kind_p))]
        ts = rng.uniform(0, horizon)
        amount = rng.uniform(40.0, 950.0)
        client = clients[int(rng.integers(len(clients)))]
        acct = accounts[client][int(rng.integers(len(accounts[client])))]
        if ttype == "DEPOSIT-CASH":
            emit(prefix, ttype, ts, amount, 0, bene=client, bene_acct=acct)
        elif ttype in ("WITHDRAWAL", "EXCHANGE"):
            emit(prefix, ttype, ts, amount, 0, sender=client, sender_acct=acct)
        elif ttype == "MAKE-PAYMENT":
            company = companies[int(rng.integers(len(companies)))]
            emit(prefix, ttype, ts, amount, 0, sender=client, sender_acct=acct,
                 bene=company, bene_acct=f"ACCOUNT-C{5000 + companies.index(company)}")
        else:
            other = clients[int(rng.integers(len(clients)))]
            if other == client:
                other = clients[(clients.index(client) + 1) % len(clients)]
            other_acct = accounts[other][int(rng.integers(len(accounts[other])))]
            emit(prefix, ttype, ts, amount, 0, sender=client, sender_acct=acct,
                 bene=other, bene_acct=other_acct)

    # Victims need an anchor transaction on the burst account so every
    # labeled quick payment lands within theta of a same-account predecessor.
    anchors: dict[str, list[TransactionRecord]] = {}
    for r in rows:
        if r.sender_account:
            anchors.setdefault(r.sender_account, []).append(r)

    anchored_accounts = sorted(anchors)
    if n_episodes > 0 and not anchored_accounts:
        raise ConfigError("no background sender activity to anchor fraud episodes on")

    theta = config.burst_theta_seconds
    mule_seq = 0
    for ep in range(n_episodes):
        burst_acct = anchored_accounts[int(rng.integers(len(anchored_accounts)))]
        anchor = anchors[burst_acct][int(rng.integers(len(anchors[burst_acct])))]
        victim = anchor.sender_id
        victim_accounts = accounts.get(victim, [burst_acct])
        other_accts = [a for a in victim_accounts if a != burst_acct]
        withdraw_acct = other_accts[0] if other_accts else burst_acct

        mule_seq += 1
        mule = f"CLIENT-M{9000 + mule_seq}"
        mule_acct = f"ACCOUNT-M{9000 + mule_seq}"
        mule_country = (config.rare_countries[int(rng.integers(len(config.rare_countries)))]
                        if rng.random() < config.rare_country_rate
                        else config.countries[int(rng.integers(len(config.countries)))])

        t = anchor.timestamp + rng.uniform(1.0, theta * 0.8)
        for k in range(config.burst_length):
            amount = (rng.uniform(*config.test_payment_range) if k == 0
                      else rng.uniform(250.0, 900.0))
            rows.append(TransactionRecord(
                transaction_id=next_id("QUICK-PAYMENT"),
                sender_id=victim,
                sender_account=burst_acct,
                sender_country=party_country(victim),
                bene_id=mule,
                bene_account=mule_acct,
                bene_country=mule_country,
                usd_amount=round(float(amount), 2),
                transaction_type="QUICK-PAYMENT",
                timestamp=int(t),
                label=1,
            ))
            t += rng.uniform(1.0, theta * 0.8)

        if config.withdrawal_followup:
            emit("WITHDRAWAL", "WITHDRAWAL", t + rng.uniform(1.0, theta * 0.5),
                 rng.uniform(300.0, 950.0), 1, sender=victim, sender_acct=withdraw_acct)

    rows.sort(key=lambda r: (r.timestamp, r.transaction_id))
    return rows
