"""Per-house audit reports over committed history.

A report flattens the house's history bundle into one event per committed
transaction, ordered by (block_number, tx_index); envelopes that were flagged
invalid but touched the same keys appear in a separate rejected-attempts
section. Every referenced document is re-verified against storage. The whole
body is sealed with a digest so exported reports are tamper-evident
(see docs/report-schema.md).
"""

from __future__ import annotations

import csv
import io
import json

from .codec import canonical_bytes, digest_of
from .ledger import FLAG_VALID

EXPORT_FORMATS = ("json", "csv", "text")

CSV_COLUMNS = (
    "seq", "block_number", "tx_index", "tx_id", "timestamp",
    "actor", "operation", "summary", "validation_flag",
)


class AuditError(Exception):
    code = "AuditError"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class UnknownFormat(AuditError):
    code = "UnknownFormat"


class MalformedReport(AuditError):
    code = "MalformedReport"


def _abbreviate(value: str, limit: int = 16) -> str:
    return value if len(value) <= limit else value[: limit - 1] + "…"


def _summarize(operation: str, args: list) -> str:
    rendered = ", ".join(_abbreviate(str(a)) for a in args)
    return f"{operation}({rendered})"


def build_report(service, house_id: str, auditor_id: str) -> dict:
    """Assemble the audit report for one house as seen by ``auditor_id``.

    Role and existence checks ride on the contract's history query, so a
    non-auditor gets Forbidden and an unknown house HouseNotFound.
    """
    bundle = service.evaluate(auditor_id, "getHistoricData", [house_id])
    height = service.ledger.chain_height()

    histories: list[dict] = list(bundle["house"])
    for section in ("proposals", "documents", "requests", "terms"):
        for entries in bundle[section].values():
            histories.extend(entries)
    closure = {h["state_key"] for h in histories}

    seen: dict[tuple[int, int], dict] = {}
    for entry in histories:
        seen.setdefault((entry["block_number"], entry["tx_index"]), entry)
    events = []
    for seq, (coords, entry) in enumerate(sorted(seen.items()), start=1):
        envelope = service.ledger.get_block(coords[0]).envelopes[coords[1]]
        events.append({
            "seq": seq,
            "block_number": coords[0],
            "tx_index": coords[1],
            "tx_id": entry["tx_id"],
            "timestamp": entry["timestamp"],
            "actor": entry["creator"],
            "operation": entry["operation"],
            "summary": _summarize(envelope["operation"], envelope["args"]),
            "validation_flag": FLAG_VALID,
        })

    rejected = []
    for number, index in service.ledger.invalid_tx_coords():
        block = service.ledger.get_block(number)
        envelope = block.envelopes[index]
        touched = {k for k, _ in envelope.get("read_set", [])}
        touched.update(k for k, _ in envelope.get("write_set", []))
        if touched & closure:
            rejected.append({
                "block_number": number,
                "tx_index": index,
                "tx_id": envelope["tx_id"],
                "timestamp": envelope["timestamp"],
                "actor": envelope["creator"],
                "operation": envelope["operation"],
                "summary": _summarize(envelope["operation"], envelope["args"]),
                "validation_flag": block.validation_flags[index],
            })

    checks = []
    for entries in bundle["documents"].values():
        meta = entries[-1]["value_after"]
        checks.append({
            "document_id": meta["document_id"],
            "digest": meta["content_digest"],
            "integrity": service.blobstore.verify_against_ledger(meta["content_digest"]),
        })
    checks.sort(key=lambda c: c["document_id"])

    body = {
        "house_id": house_id,
        "generated_at": service._now_ms(),
        "generated_by": auditor_id,
        "chain_height_at_generation": height,
        "events": events,
        "rejected_attempts": rejected,
        "document_checks": checks,
    }
    return {**body, "report_digest": digest_of(body)}


def export_report(report: dict, fmt: str) -> bytes:
    if fmt == "json":
        return canonical_bytes(report)
    if fmt == "csv":
        out = io.StringIO()
        writer = csv.writer(out)
        writer.writerow(CSV_COLUMNS)
        for event in report["events"]:
            writer.writerow([event[c] for c in CSV_COLUMNS])
        return out.getvalue().encode("utf-8")
    if fmt == "text":
        lines = [
            f"Audit report for house {report['house_id']}",
            f"generated_at={report['generated_at']} by={report['generated_by']} "
            f"chain_height={report['chain_height_at_generation']}",
            "",
            f"Events ({len(report['events'])}):",
        ]
        for e in report["events"]:
            lines.append(
                f"  [{e['seq']}] block {e['block_number']}/{e['tx_index']} "
                f"{e['operation']} by {e['actor']} at {e['timestamp']} — {e['summary']}"
            )
        lines.append("")
        lines.append(f"Rejected attempts ({len(report['rejected_attempts'])}):")
        for r in report["rejected_attempts"]:
            lines.append(
                f"  block {r['block_number']}/{r['tx_index']} {r['operation']} "
                f"by {r['actor']} flagged {r['validation_flag']}"
            )
        lines.append("")
        lines.append(f"Document checks ({len(report['document_checks'])}):")
        for c in report["document_checks"]:
            lines.append(f"  {c['document_id']}: {c['integrity']} (digest {c['digest']})")
        lines.append("")
        lines.append(f"report_digest={report['report_digest']}")
        return "\n".join(lines).encode("utf-8")
    raise UnknownFormat(fmt)


def verify_report(data: bytes) -> bool:
    """True iff the json export's report_digest recomputes over its body."""
    try:
        report = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedReport(str(exc)) from exc
    if not isinstance(report, dict) or "report_digest" not in report:
        raise MalformedReport("missing report_digest")
    body = {k: v for k, v in report.items() if k != "report_digest"}
    return digest_of(body) == report["report_digest"]
