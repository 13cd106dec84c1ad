"""One-shot concurrent load rounds against the running gateways.

Each round spawns ``concurrency`` threads that release together on a barrier
and issue exactly one pre-prepared HTTP request each. Within a sweep level the
rounds chain: the houses a createHouse round commits become the targets of the
createProposal round, whose proposals receive the createDocument uploads, and
so on — so fixtures are mostly built by the benched traffic itself, with a
sequential repair pass patching any index whose request failed under load.
Every request targets its own keys, so MVCC conflicts measure as zero and the
numbers isolate pipeline contention.
"""

from __future__ import annotations

import secrets
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import requests

from .stats import save_round

CHAIN_ORDER = (
    "createHouse", "createProposal", "createDocument", "requestAccess",
    "acceptAccess", "getDocument", "acceptProposal", "getHistoricData",
)

STAGE_DEPS = {
    "createHouse": (),
    "createProposal": ("createHouse",),
    "createDocument": ("createHouse", "createProposal"),
    "requestAccess": ("createHouse", "createProposal", "createDocument"),
    "acceptAccess": ("createHouse", "createProposal", "createDocument", "requestAccess"),
    "getDocument": ("createHouse", "createProposal", "createDocument"),
    "acceptProposal": ("createHouse", "createProposal"),
    "getHistoricData": (
        "createHouse", "createProposal", "createDocument",
        "requestAccess", "acceptAccess", "acceptProposal",
    ),
}

_WORKER_STACK = 512 * 1024


class HarnessError(Exception):
    code = "HarnessError"


class FixtureError(HarnessError):
    code = "FixtureError"


class TargetUnreachable(HarnessError):
    code = "TargetUnreachable"


@dataclass(frozen=True)
class RequestSpec:
    method: str
    url: str
    headers: dict
    json: Optional[dict] = None
    files: Optional[dict] = None


@dataclass
class ChainState:
    """Per-level fixture chain; index i of every list belongs to house i."""

    level: int
    houses: list = field(default_factory=list)
    proposals: list = field(default_factory=list)
    documents: list = field(default_factory=list)
    access_requests: list = field(default_factory=list)


class LoadHarness:
    def __init__(self, org1_url: str, org2_url: str, timeout_s: float = 30.0,
                 fixture_workers: int = 16):
        self.org1 = org1_url.rstrip("/")
        self.org2 = org2_url.rstrip("/")
        self.timeout_s = timeout_s
        self.fixture_workers = fixture_workers
        self.sfx = secrets.token_hex(4)
        self.tokens: dict[str, str] = {}
        self.users: dict[str, str] = {}

    # -- provisioning -------------------------------------------------------------

    def check_target(self) -> None:
        for base in (self.org1, self.org2):
            try:
                response = requests.get(f"{base}/healthz", timeout=5)
                response.raise_for_status()
            except requests.RequestException as exc:
                raise TargetUnreachable(f"{base}: {exc}") from exc

    def provision(self) -> None:
        """Register, enroll and log in one identity per role; accept terms."""
        self.check_target()
        plan = (
            ("tenant", "Tenant", self.org1),
            ("landlord", "Landlord", self.org2),
            ("auditor", "Auditor", self.org2),
        )
        for short, role, base in plan:
            user_id = f"bench-{short}-{self.sfx}"
            secret = self._json("POST", base, "/auth/register", json={
                "user_id": user_id, "password": "bench-pw", "role": role,
            })["secret"]
            self._json("POST", base, "/auth/enroll",
                       json={"user_id": user_id, "secret": secret})
            token = self._json("POST", base, "/auth/login",
                               json={"user_id": user_id})["token"]
            self.users[short] = user_id
            self.tokens[short] = token
        digest = self._json("GET", self.org1, "/terms")["terms_digest"]
        self._json("POST", self.org1, "/terms/accept",
                   json={"terms_digest": digest}, headers=self._auth("tenant"))

    def _auth(self, short: str) -> dict:
        return {"Authorization": f"Bearer {self.tokens[short]}"}

    def _json(self, method: str, base: str, path: str, **kwargs):
        response = requests.request(method, base + path, timeout=self.timeout_s, **kwargs)
        if response.status_code >= 400:
            raise FixtureError(f"{method} {path} -> {response.status_code}: {response.text}")
        return response.json()

    # -- request preparation ---------------------------------------------------------

    def specs_for(self, function: str, chain: ChainState) -> list[RequestSpec]:
        n = chain.level
        if function == "createHouse":
            chain.houses = [f"bench-house-{self.sfx}-{n}-{i}" for i in range(n)]
            chain.proposals = [None] * n
            chain.documents = [None] * n
            chain.access_requests = [None] * n
            return [
                RequestSpec("POST", f"{self.org2}/houses", self._auth("landlord"),
                            json={"house_id": h})
                for h in chain.houses
            ]
        if function == "createProposal":
            return [
                RequestSpec("POST", f"{self.org1}/houses/{h}/proposals", self._auth("tenant"))
                for h in chain.houses
            ]
        if function == "createDocument":
            return [
                RequestSpec(
                    "POST", f"{self.org1}/proposals/{p}/documents", self._auth("tenant"),
                    files={"file": (
                        f"bench-{i}.pdf",
                        f"bench document {self.sfx}/{n}/{i}\n".encode() * 24,
                    )},
                )
                for i, p in enumerate(chain.proposals)
            ]
        if function == "requestAccess":
            return [
                RequestSpec("POST", f"{self.org2}/documents/{d}/access-requests",
                            self._auth("landlord"))
                for d in chain.documents
            ]
        if function == "acceptAccess":
            return [
                RequestSpec("POST", f"{self.org1}/access-requests/{r}/accept",
                            self._auth("tenant"))
                for r in chain.access_requests
            ]
        if function == "getDocument":
            return [
                RequestSpec("GET", f"{self.org1}/documents/{d}", self._auth("tenant"))
                for d in chain.documents
            ]
        if function == "acceptProposal":
            return [
                RequestSpec("POST", f"{self.org2}/proposals/{p}/accept",
                            self._auth("landlord"))
                for p in chain.proposals
            ]
        if function == "getHistoricData":
            return [
                RequestSpec("GET", f"{self.org2}/audit/houses/{h}/report",
                            self._auth("auditor"))
                for h in chain.houses
            ]
        raise HarnessError(f"unknown function {function!r}")

    # -- firing -----------------------------------------------------------------------

    def _fire(self, spec: RequestSpec) -> dict:
        start = time.perf_counter()
        try:
            response = requests.request(
                spec.method, spec.url, headers=spec.headers,
                json=spec.json, files=spec.files, timeout=self.timeout_s,
            )
        except requests.Timeout:
            return self._sample(start, False, 0, "Timeout")
        except requests.ConnectionError:
            return self._sample(start, False, 0, "ConnectionError")
        except requests.RequestException:
            return self._sample(start, False, 0, "TransportError")
        ok = 200 <= response.status_code < 300
        code, body = "", None
        if ok:
            if response.headers.get("content-type", "").startswith("application/json"):
                try:
                    body = response.json()
                except ValueError:
                    body = None
        else:
            try:
                code = response.json()["error"]["code"]
            except Exception:
                code = f"HTTP{response.status_code}"
        sample = self._sample(start, ok, response.status_code, code)
        sample["body"] = body
        return sample

    @staticmethod
    def _sample(start: float, ok: bool, status: int, code: str) -> dict:
        return {
            "latency_ms": (time.perf_counter() - start) * 1000.0,
            "ok": ok,
            "status": status,
            "error_code": code,
        }

    def _one_shot(self, specs: list[RequestSpec]) -> tuple[list[dict], float]:
        n = len(specs)
        results: list[Optional[dict]] = [None] * n
        barrier = threading.Barrier(n + 1)

        def worker(index: int, spec: RequestSpec) -> None:
            barrier.wait()
            results[index] = self._fire(spec)

        previous = threading.stack_size(_WORKER_STACK)
        try:
            threads = [
                threading.Thread(target=worker, args=(i, s), daemon=True)
                for i, s in enumerate(specs)
            ]
        finally:
            threading.stack_size(previous)
        for thread in threads:
            thread.start()
        barrier.wait()
        started = time.perf_counter()
        for thread in threads:
            thread.join()
        wall = time.perf_counter() - started
        return [r if r is not None else self._sample(started, False, 0, "NoResult")
                for r in results], wall

    def _pooled(self, specs: list[RequestSpec]) -> list[dict]:
        """Fixture building: same requests, bounded parallelism, not measured."""
        with ThreadPoolExecutor(max_workers=min(self.fixture_workers, max(1, len(specs)))) as pool:
            return list(pool.map(self._fire, specs))

    # -- repair ------------------------------------------------------------------------

    def _repair(self, spec: RequestSpec, tolerate: tuple[str, ...]) -> Optional[dict]:
        last = ""
        for attempt in range(5):
            sample = self._fire(spec)
            if sample["ok"]:
                return sample.get("body")
            if sample["error_code"] in tolerate:
                return None
            last = sample["error_code"]
            time.sleep(0.2 * (attempt + 1))
        raise FixtureError(f"repair failed for {spec.method} {spec.url}: {last}")

    def _find_proposal(self, house_id: str) -> str:
        rows = self._json("GET", self.org2, "/proposals/landlord",
                          headers=self._auth("landlord"))
        for row in rows:
            if row["house_id"] == house_id:
                return row["proposal_id"]
        raise FixtureError(f"no proposal found for {house_id}")

    def _find_request(self, document_id: str) -> str:
        rows = self._json("GET", self.org1, "/access-requests/tenant",
                          headers=self._auth("tenant"))
        for row in rows:
            if row["document_id"] == document_id:
                return row["request_id"]
        raise FixtureError(f"no access request found for {document_id}")

    def _harvest(self, function: str, chain: ChainState,
                 specs: list[RequestSpec], samples: list[dict]) -> None:
        """Record created ids and sequentially patch failed indexes so the
        next chained round has a complete fixture."""
        for i, (spec, sample) in enumerate(zip(specs, samples)):
            body = sample.get("body") if sample["ok"] else None
            if function == "createHouse":
                if not sample["ok"]:
                    self._repair(spec, tolerate=("HouseExists",))
            elif function == "createProposal":
                if body is None:
                    repaired = self._repair(spec, tolerate=("DuplicateProposal",))
                    chain.proposals[i] = (repaired["result"]["proposal_id"] if repaired
                                          else self._find_proposal(chain.houses[i]))
                else:
                    chain.proposals[i] = body["result"]["proposal_id"]
            elif function == "createDocument":
                if body is None:
                    repaired = self._repair(spec, tolerate=())
                    chain.documents[i] = repaired["result"]["document_id"]
                else:
                    chain.documents[i] = body["result"]["document_id"]
            elif function == "requestAccess":
                if body is None:
                    repaired = self._repair(spec, tolerate=("DuplicateRequest",))
                    chain.access_requests[i] = (
                        repaired["result"]["request_id"] if repaired
                        else self._find_request(chain.documents[i])
                    )
                else:
                    chain.access_requests[i] = body["result"]["request_id"]
            elif function == "acceptAccess":
                if not sample["ok"]:
                    self._repair(spec, tolerate=("AlreadyDecided",))
            elif function == "acceptProposal":
                if not sample["ok"]:
                    self._repair(spec, tolerate=("AlreadyDecided", "HouseAlreadyRented"))

    # -- round drivers --------------------------------------------------------------------

    def build_stage(self, function: str, chain: ChainState) -> None:
        specs = self.specs_for(function, chain)
        samples = self._pooled(specs)
        self._harvest(function, chain, specs, samples)

    def run_round(self, function: str, chain: ChainState) -> dict:
        specs = self.specs_for(function, chain)
        samples, wall = self._one_shot(specs)
        self._harvest(function, chain, specs, samples)
        for sample in samples:
            sample.pop("body", None)
        return {
            "function": function,
            "concurrency": chain.level,
            "wall_clock_s": wall,
            "started_at": int(time.time() * 1000),
            "samples": samples,
        }

    def run_function(self, function: str, concurrency: int,
                     out_dir: Optional[str] = None,
                     log: Callable[[str], None] = lambda _m: None) -> dict:
        """Bench one function at one level, building prerequisites unmeasured."""
        if function not in STAGE_DEPS:
            raise HarnessError(f"unknown function {function!r}")
        if not self.tokens:
            self.provision()
        chain = ChainState(level=concurrency)
        for stage in STAGE_DEPS[function]:
            log(f"fixture: {stage} x{concurrency}")
            self.build_stage(stage, chain)
        log(f"round: {function} @ {concurrency}")
        round_ = self.run_round(function, chain)
        if out_dir:
            save_round(out_dir, round_)
        return round_

    def sweep(self, levels: tuple[int, ...], out_dir: Optional[str] = None,
              log: Callable[[str], None] = lambda _m: None) -> list[dict]:
        """All eight functions at every level, chained so benched rounds build
        the fixtures for the rounds after them."""
        if not self.tokens:
            self.provision()
        rounds = []
        for level in levels:
            chain = ChainState(level=level)
            for function in CHAIN_ORDER:
                log(f"round: {function} @ {level}")
                round_ = self.run_round(function, chain)
                if out_dir:
                    save_round(out_dir, round_)
                rounds.append(round_)
        return rounds
