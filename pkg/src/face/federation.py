"""One-round, summary-only exchange over a shared directory.

Transport is one JSON envelope per file (canonical key ordering, UTF-8,
shortest round-trip floats) so runs are auditable and exactly replayable.
Envelope payloads hold aggregates only; per-row data never leaves a site.

Run directory layout:
    run_dir/broadcast.json            target covariate-mean broadcast
    run_dir/site_<id>.summary.json    one summary envelope per site
    run_dir/result.json               leading-site output

Site directory layout (inputs):
    <site_dir>/data.csv               y,a,x1..xp records
    <site_dir>/site.json              {"site_id": ..., "role": "target"|"source"}
"""

from __future__ import annotations

import hashlib
import json
import os
import pathlib

from .aggregate import AggregationResult
from .data import Basis, SiteData, SourceSummary, TargetSummary, ValidationError, load_site_csv
from .pipeline import (
    Broadcast,
    PipelineConfig,
    SourceBundle,
    TargetBundle,
    aggregate_bundles,
    combine_broadcast,
    source_site_bundle,
    target_site_bundle,
)

PROTOCOL_VERSION = "face/1"
PHASES = ("target_broadcast", "target_summary", "source_summary")


class ProtocolError(RuntimeError):
    """Envelope integrity or protocol contract violation."""


def canonical_payload_bytes(payload: dict) -> bytes:
    """Canonical serialization: sorted keys, no whitespace, UTF-8."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False).encode("utf-8")


def make_envelope(sender_site: str, phase: str, payload: dict) -> dict:
    if phase not in PHASES:
        raise ProtocolError(f"unknown phase {phase!r}")
    return {
        "protocol_version": PROTOCOL_VERSION,
        "sender_site": sender_site,
        "phase": phase,
        "payload": payload,
        "checksum": hashlib.sha256(canonical_payload_bytes(payload)).hexdigest(),
    }


def verify_envelope(envelope: dict, expected_phase: str | None = None) -> dict:
    """Checksum + protocol checks; returns the payload."""
    version = envelope.get("protocol_version")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"protocol_version mismatch: got {version!r}, expected {PROTOCOL_VERSION!r}")
    phase = envelope.get("phase")
    if phase not in PHASES:
        raise ProtocolError(f"unknown phase {phase!r}")
    if expected_phase is not None and phase != expected_phase:
        raise ProtocolError(f"expected phase {expected_phase!r}, got {phase!r}")
    payload = envelope.get("payload")
    digest = hashlib.sha256(canonical_payload_bytes(payload)).hexdigest()
    if digest != envelope.get("checksum"):
        raise ProtocolError(f"checksum mismatch for envelope from {envelope.get('sender_site')!r}")
    return payload


def write_envelope(path, envelope: dict) -> None:
    """Atomic write (temp file + rename) of a canonical envelope."""
    path = pathlib.Path(path)
    data = json.dumps(envelope, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_envelope(path) -> dict:
    with open(path, "rb") as fh:
        return json.loads(fh.read().decode("utf-8"))


def load_site_dir(site_dir) -> SiteData:
    site_dir = pathlib.Path(site_dir)
    if not site_dir.is_dir():
        raise ValidationError(f"missing site directory {site_dir}")
    meta_path = site_dir / "site.json"
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    data = load_site_csv(site_dir / "data.csv", role=meta["role"])
    return SiteData(site_id=meta["site_id"], y=data.y, a=data.a, x=data.x, role=meta["role"])


def _target_payload(bundle: TargetBundle) -> dict:
    payload = {"summary": bundle.summary.to_dict()}
    if bundle.train is not None:
        payload["cv"] = {"train": bundle.train.to_dict(),
                         "validation": bundle.validation.to_dict()}
    return payload


def _source_payload(bundle: SourceBundle) -> dict:
    payload = {"summary": bundle.summary.to_dict()}
    if bundle.train is not None:
        payload["cv"] = {"train": bundle.train.to_dict(),
                         "validation": bundle.validation.to_dict()}
    return payload


def _target_bundle_from_payload(payload: dict) -> TargetBundle:
    cv = payload.get("cv")
    return TargetBundle(
        summary=TargetSummary.from_dict(payload["summary"]),
        train=TargetSummary.from_dict(cv["train"]) if cv else None,
        validation=TargetSummary.from_dict(cv["validation"]) if cv else None,
    )


def _source_bundle_from_payload(payload: dict) -> SourceBundle:
    cv = payload.get("cv")
    return SourceBundle(
        summary=SourceSummary.from_dict(payload["summary"]),
        train=SourceSummary.from_dict(cv["train"]) if cv else None,
        validation=SourceSummary.from_dict(cv["validation"]) if cv else None,
    )


class FederatedRun:
    """Orchestrates Algorithm 1 over a shared run directory.

    Phases are barriers: the broadcast is written before any source runs.
    ``emission_counts`` records how many summaries each site emitted; the
    one-round contract keeps every count at exactly one.
    """

    def __init__(self, run_dir, config: PipelineConfig | None = None):
        self.run_dir = pathlib.Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.config = config or PipelineConfig()
        self.emission_counts: dict[str, int] = {}

    def _summary_path(self, site_id: str) -> pathlib.Path:
        return self.run_dir / f"site_{site_id}.summary.json"

    @property
    def broadcast_path(self) -> pathlib.Path:
        return self.run_dir / "broadcast.json"

    @property
    def result_path(self) -> pathlib.Path:
        return self.run_dir / "result.json"

    def _emit(self, site_id: str, phase: str, payload: dict) -> None:
        self.emission_counts[site_id] = self.emission_counts.get(site_id, 0) + 1
        if self.emission_counts[site_id] > 1 or self._summary_path(site_id).exists():
            raise ProtocolError(f"site {site_id!r} attempted a second emission")
        write_envelope(self._summary_path(site_id), make_envelope(site_id, phase, payload))

    def target_phase(self, site_dirs) -> Broadcast:
        """Run Step 1 at every target site, then write the broadcast."""
        sites = [load_site_dir(d) for d in site_dirs]
        ids = [s.site_id for s in sites]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate site_id among targets: {ids}")
        if any(s.role != "target" for s in sites):
            raise ValidationError("target_phase given a non-target site")
        basis = Basis.identity(sites[0].p)
        bundles = [target_site_bundle(s, basis, self.config) for s in sites]
        for site, bundle in zip(sites, bundles):
            self._emit(site.site_id, "target_summary", _target_payload(bundle))
        broadcast = combine_broadcast(bundles)
        write_envelope(
            self.broadcast_path,
            make_envelope("+".join(sorted(ids)), "target_broadcast", broadcast.to_dict()),
        )
        return broadcast

    def source_phase(self, site_dirs) -> None:
        """Run Step 2 at every source site; each reads only the broadcast."""
        broadcast = Broadcast.from_dict(
            verify_envelope(read_envelope(self.broadcast_path), "target_broadcast")
        )
        for site_dir in site_dirs:
            site = load_site_dir(site_dir)
            if site.role != "source":
                raise ValidationError(f"source_phase given non-source site {site.site_id!r}")
            if site.site_id in self.emission_counts:
                raise ValidationError(f"duplicate site_id {site.site_id!r}")
            basis = Basis.identity(site.p)
            bundle = source_site_bundle(site, broadcast, basis, self.config)
            self._emit(site.site_id, "source_summary", _source_payload(bundle))

    def leading_phase(self, lambda_spec="cv", lambda_grid=None, alpha: float = 0.05) -> AggregationResult:
        """Collect all summary envelopes and solve the aggregation."""
        target_bundles, source_bundles = [], []
        for path in sorted(self.run_dir.glob("site_*.summary.json")):
            envelope = read_envelope(path)
            payload = verify_envelope(envelope)
            if envelope["phase"] == "target_summary":
                target_bundles.append(_target_bundle_from_payload(payload))
            elif envelope["phase"] == "source_summary":
                source_bundles.append(_source_bundle_from_payload(payload))
            else:
                raise ProtocolError(f"unexpected phase in {path.name}")
        if not target_bundles:
            raise ValidationError("no target summaries found in run directory")
        result = aggregate_bundles(
            target_bundles, source_bundles,
            lambda_spec=lambda_spec, lambda_grid=lambda_grid, alpha=alpha,
        )
        # The result file is leading-site output, not a phase envelope.
        document = {"protocol_version": PROTOCOL_VERSION, "result": result.to_dict()}
        tmp = self.result_path.with_name(self.result_path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(canonical_payload_bytes(document))
        os.replace(tmp, self.result_path)
        return result


def run_target_phase(site_dirs, run_dir, config: PipelineConfig | None = None) -> FederatedRun:
    run = FederatedRun(run_dir, config)
    run.target_phase(site_dirs)
    return run


def run_source_phase(site_dirs, run_dir, config: PipelineConfig | None = None,
                     run: FederatedRun | None = None) -> FederatedRun:
    run = run or FederatedRun(run_dir, config)
    run.source_phase(site_dirs)
    return run


def run_leading_phase(run_dir, lambda_spec="cv", lambda_grid=None, alpha: float = 0.05,
                      run: FederatedRun | None = None) -> AggregationResult:
    run = run or FederatedRun(run_dir)
    return run.leading_phase(lambda_spec=lambda_spec, lambda_grid=lambda_grid, alpha=alpha)
