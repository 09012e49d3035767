"""Latency and overhead measurements against a local deployment.

Methodology: every simulated user is an independent worker; the n requests
of a run are split across the workers and each worker fires its share in
series, with worker start times staggered uniformly across one second. A
measurement is repeated over several independent runs against warm servers
and reported as mean with a 95% confidence interval computed from the run
means. Absolute numbers are machine-dependent; the quantities of interest
are ratios (full enforcement vs the plain bearer-token baseline, RSA vs
ECDSA signing) and how latency scales with the request count.
"""

from __future__ import annotations

import csv
import datetime
import json
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import httpx

from .capability import (
    ClientClaim,
    ContextRequirement,
    MasterCapability,
    PermissionEntry,
    PermissionSequence,
    sign,
)
from .client import GrantTokens, ProtocolClient
from .deploy import RECENT_USE, LocalDeployment
from .keys import CredentialAuthority, SignatureAlg

# two-sided 95% t critical values by sample count (df = runs - 1)
_T95 = {2: 12.706, 3: 4.303, 4: 3.182, 5: 2.776, 6: 2.571, 7: 2.447, 8: 2.365, 9: 2.306, 10: 2.262}

ALGS = {
    "ecdsa": SignatureAlg.ECDSA_P256_SHA256,
    "rsa": SignatureAlg.RSA3072_SHA256,
}

BENCH_SCOPE = {
    "application": "Payment",
    "objectAttribute": {"resourceType": ["balance"], "resourceID": "Alice"},
    "actions": ["charge"],
    "amount": "$10",
}


def mean_ci95(run_means: list[float]) -> tuple[float, float]:
    """Mean of the run means and its 95% confidence half-width."""
    mean = statistics.fmean(run_means)
    if len(run_means) < 2:
        return mean, 0.0
    t = _T95.get(len(run_means), 1.96)
    half = t * statistics.stdev(run_means) / len(run_means) ** 0.5
    return mean, half


@dataclass
class ModeResult:
    """One mode's measurements across all runs."""

    mode: str
    latencies_ms: list[list[float]]  # per run
    phases_ms: dict[str, list[float]] = field(default_factory=dict)

    @property
    def run_means(self) -> list[float]:
        return [statistics.fmean(run) for run in self.latencies_ms if run]

    @property
    def mean_ms(self) -> float:
        return mean_ci95(self.run_means)[0]

    @property
    def ci95_ms(self) -> float:
        return mean_ci95(self.run_means)[1]

    def phase_means(self) -> dict[str, float]:
        return {k: statistics.fmean(v) for k, v in self.phases_ms.items() if v}


@dataclass
class BenchReport:
    target: str
    alg: str
    n: int
    runs: int
    full: ModeResult | None = None
    plain: ModeResult | None = None

    @property
    def overhead_ratio(self) -> float | None:
        if self.full is None or self.plain is None or self.plain.mean_ms == 0:
            return None
        return self.full.mean_ms / self.plain.mean_ms

    def modes(self) -> list[ModeResult]:
        return [m for m in (self.full, self.plain) if m is not None]

    def render(self) -> dict[str, Any]:
        body: dict[str, Any] = {
            "target": self.target,
            "alg": self.alg,
            "n": self.n,
            "runs": self.runs,
        }
        for result in self.modes():
            mean, ci = mean_ci95(result.run_means)
            body[result.mode] = {
                "mean_ms": round(mean, 3),
                "ci95_ms": round(ci, 3),
                "run_means_ms": [round(v, 3) for v in result.run_means],
                "phase_means_ms": {k: round(v, 3) for k, v in result.phase_means().items()},
            }
        if self.overhead_ratio is not None:
            body["overhead_ratio"] = round(self.overhead_ratio, 4)
        return body

    def summary(self) -> str:
        lines = [f"target={self.target} alg={self.alg} n={self.n} runs={self.runs}"]
        for result in self.modes():
            mean, ci = mean_ci95(result.run_means)
            lines.append(f"  {result.mode:5}: {mean:8.3f} ms +/- {ci:.3f} (95% CI over {self.runs} runs)")
            phases = result.phase_means()
            if phases:
                detail = ", ".join(f"{k}={v:.3f}" for k, v in sorted(phases.items()))
                lines.append(f"         server phases: {detail}")
        if self.overhead_ratio is not None:
            lines.append(f"  overhead ratio (full/plain): {self.overhead_ratio:.3f}")
        return "\n".join(lines)

    def write_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["target", "alg", "mode", "run", "index", "latency_ms"])
            for result in self.modes():
                for run_index, run in enumerate(result.latencies_ms, start=1):
                    for i, latency in enumerate(run):
                        writer.writerow(
                            [self.target, self.alg, result.mode, run_index, i, f"{latency:.3f}"]
                        )


def _fire(jobs: list[Callable[[], float]], workers: int) -> list[float]:
    """Spread the jobs over the workers; each worker starts at its offset
    within a one-second ramp and then works its share serially."""
    workers = max(1, min(workers, len(jobs)))
    shares: list[list[Callable[[], float]]] = [jobs[i::workers] for i in range(workers)]

    def work(slot: int) -> list[float]:
        time.sleep(slot / workers)
        return [job() for job in shares[slot]]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        batches = list(pool.map(work, range(workers)))
    return [latency for batch in batches for latency in batch]


def _authz_job(http: httpx.Client, as_url: str, assertion_headers: dict[str, str]) -> Callable[[], float]:
    def job() -> float:
        start = time.perf_counter()
        response = http.post(f"{as_url}/authorization", headers=assertion_headers)
        elapsed = (time.perf_counter() - start) * 1000.0
        response.raise_for_status()
        return elapsed

    return job


def _collect_phases(response: httpx.Response, sink: dict[str, list[float]]) -> None:
    header = response.headers.get("x-timing")
    if not header:
        return
    try:
        phases = json.loads(header)
    except json.JSONDecodeError:
        return
    for key, value in phases.items():
        if isinstance(value, (int, float)):
            sink.setdefault(key, []).append(float(value))


def _resource_job(
    client: ProtocolClient,
    rs_url: str,
    grant: GrantTokens,
    plain: bool,
    phase_sink: dict[str, list[float]],
) -> Callable[[], float]:
    def job() -> float:
        start = time.perf_counter()
        response = client.access(
            rs_url,
            "alice",
            "account",
            "charge",
            grant.master,
            eso_tokens=() if plain else grant.eso.values(),
            pop=not plain,
        )
        elapsed = (time.perf_counter() - start) * 1000.0
        response.raise_for_status()
        _collect_phases(response, phase_sink)
        return elapsed

    return job


def _measure_mode(
    mode: str,
    target: str,
    alg: SignatureAlg,
    n: int,
    runs: int,
    workers: int,
) -> ModeResult:
    result = ModeResult(mode=mode, latencies_ms=[])
    with LocalDeployment(profile="bench", alg=alg, plain=(mode == "plain")) as deployment:
        keys = deployment.client_keys["B"]
        rs_url = deployment.rs_urls["payments-rs"]
        with deployment.http(timeout=30.0) as http:
            client = ProtocolClient(deployment.as_url, keys, http)
            if target == "authz":
                # one signed claim reused for every request keeps client-side
                # signing out of the measured path
                assertion = client.request_authorization("payments-rs", BENCH_SCOPE)
                assertion.raise_for_status()
                headers = _reusable_claim_headers(client)
                for _ in range(runs):
                    jobs = [_authz_job(http, deployment.as_url, headers) for _ in range(n)]
                    result.latencies_ms.append(_fire(jobs, workers))
            else:
                for _ in range(runs):
                    grants = _mint_grants(client, n, workers)
                    jobs = [
                        _resource_job(client, rs_url, grant, mode == "plain", result.phases_ms)
                        for grant in grants
                    ]
                    result.latencies_ms.append(_fire(jobs, workers))
    return result


def _reusable_claim_headers(client: ProtocolClient) -> dict[str, str]:
    claim = ClientClaim(
        client_id=client.keys.principal_id, target_rs="payments-rs", requested_scope=BENCH_SCOPE
    )
    assertion = sign(claim, client.keys).token()
    return {
        "grant-type": "client_credentials",
        "client-assertion-type": "jwt-bearer",
        "client-assertion": assertion,
    }


def _mint_grants(client: ProtocolClient, n: int, workers: int) -> list[GrantTokens]:
    """Pre-mint one session per planned resource request (untimed)."""

    def mint(_: int) -> GrantTokens:
        return client.grant("payments-rs", BENCH_SCOPE)

    with ThreadPoolExecutor(max_workers=max(1, min(workers, 32))) as pool:
        return list(pool.map(mint, range(n)))


def run_bench(
    target: str = "authz",
    mode: str = "full",
    alg: str = "ecdsa",
    n: int = 100,
    runs: int = 5,
    workers: int = 100,
) -> BenchReport:
    """Run the harness; mode "full" also measures the plain baseline so the
    report can state the overhead ratio."""
    if target not in ("authz", "resource"):
        raise ValueError(f"unknown bench target {target!r}")
    if mode not in ("full", "plain"):
        raise ValueError(f"unknown bench mode {mode!r}")
    signature_alg = ALGS[alg]
    report = BenchReport(target=target, alg=alg, n=n, runs=runs)
    if mode == "full":
        report.full = _measure_mode("full", target, signature_alg, n, runs, workers)
    report.plain = _measure_mode("plain", target, signature_alg, n, runs, workers)
    return report


# -- token-creation microbenchmark ------------------------------------------


def _sample_master() -> MasterCapability:
    now = datetime.datetime.now(datetime.timezone.utc)
    sequence = PermissionSequence(
        entries=(
            PermissionEntry(
                rs_id="payments-rs",
                permission="charge",
                contexts=(
                    ContextRequirement(
                        property=RECENT_USE, subject_id="Alice", rs_id="payments-rs"
                    ),
                ),
            ),
        )
    )
    return MasterCapability(
        sequence=sequence,
        client_id="B",
        state=0,
        session_id="deadbeefdeadbeefdeadbeefdeadbeef",
        issued_at=now,
        expiry=now + datetime.timedelta(hours=24),
        metadata={"issuer": "authz-server", "scope": BENCH_SCOPE},
    )


def token_signing_ms(alg: str, samples: int = 50, warmup: int = 5) -> float:
    """Mean wall time to mint (serialize + sign) one master capability."""
    keys = CredentialAuthority().issue("authz-server", alg=ALGS[alg])
    master = _sample_master()
    for _ in range(warmup):
        sign(master, keys)
    start = time.perf_counter()
    for _ in range(samples):
        sign(master, keys)
    return (time.perf_counter() - start) * 1000.0 / samples


__all__ = [
    "ALGS",
    "BENCH_SCOPE",
    "BenchReport",
    "ModeResult",
    "mean_ci95",
    "run_bench",
    "token_signing_ms",
]
