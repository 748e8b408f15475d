"""HTTP review surface over a committed run directory.

The service owns no loop state: every request reloads the candidate files
and replays the append-only decision log, so responses are pure functions
of what the loop has committed. Decision writes are serialized through one
lock and appended to the same log the loop replays on resume, which is how
reviews recorded here reach the next expansion round.
"""

from __future__ import annotations

import os
import threading
from datetime import datetime, timezone

from fastapi import FastAPI, Header, HTTPException, Query
from fastapi.responses import PlainTextResponse
from pydantic import BaseModel

from . import expand as ex
from . import loop as lp

PENDING_STATES = ("pending", "awaiting_second")
DECIDED_STATES = ("approved", "rejected", "inconsistent")


class CandidateOut(BaseModel):
    candidate_id: str
    surface: str
    proposed_class: str
    relation: str
    endpoint: str
    scenario: str
    new_category_flag: bool
    count: int
    period: int
    review_state: str
    provenance: list[str]


class CandidatePage(BaseModel):
    total: int
    page: int
    page_size: int
    pages: int
    candidates: list[CandidateOut]


class DecisionIn(BaseModel):
    candidate_id: str
    q1_relevant: bool
    q2_relation_ok: bool
    note: str = ""


class DecisionOut(BaseModel):
    candidate_id: str
    reviewer_id: str
    review_state: str


class StatusOut(BaseModel):
    run: str
    period: int
    nodes: int
    edges: int
    precision: float
    recall: float
    f1: float
    candidates: dict[str, int]
    decisions: int


def _candidate_out(c: ex.CandidateTriplet) -> CandidateOut:
    return CandidateOut(
        candidate_id=c.candidate_id, surface=c.surface,
        proposed_class=c.proposed_class, relation=c.relation,
        endpoint=c.endpoint, scenario=c.scenario,
        new_category_flag=c.new_category_flag, count=c.count,
        period=c.period, review_state=c.review_state,
        provenance=list(c.provenance),
    )


def _ordered(queue: ex.ReviewQueue, state: str | None) -> list[ex.CandidateTriplet]:
    if state is not None:
        return queue.by_state(state)
    key = lambda c: (c.period, c.candidate_id)
    front = sorted(
        (c for c in queue.candidates.values() if c.review_state in PENDING_STATES),
        key=key,
    )
    back = sorted(
        (c for c in queue.candidates.values() if c.review_state not in PENDING_STATES),
        key=key,
    )
    return front + back


def build_report(outdir: str) -> str:
    """Byte-stable metrics bundle for the run's committed periods."""
    upto = lp.latest_period(outdir)
    lines = [f"run\t{os.path.basename(os.path.abspath(outdir))}",
             f"periods\t{upto}", "", "[metrics]", lp.METRICS_HEADER]
    for m in lp._parse_metrics(outdir, upto):
        lines.append(lp._metrics_line(m))
    lines.append("")
    lines.append("[objective]")
    lines.append(lp.ACCOUNTING_HEADER)
    for o in lp._parse_objectives(outdir, upto):
        lines.append(lp._objective_line(o))
    for period in range(1, upto + 1):
        path = os.path.join(outdir, f"importance_{period:04d}.tsv")
        if not os.path.exists(path):
            continue
        lines.append("")
        lines.append(f"[importance period {period}]")
        with open(path, encoding="utf-8") as fh:
            lines.extend(fh.read().splitlines())
    lines.append("")
    lines.append("[decisions]")
    log = os.path.join(outdir, "decisions.log")
    if os.path.exists(log):
        with open(log, encoding="utf-8") as fh:
            lines.extend(fh.read().splitlines())
    return "\n".join(lines) + "\n"


def create_app(outdir: str) -> FastAPI:
    """The review API bound to one run directory."""
    run_id = os.path.basename(os.path.abspath(outdir))
    lock = threading.Lock()
    app = FastAPI(title="knowledge-loop review service")

    @app.get("/api/candidates", response_model=CandidatePage)
    def list_candidates(
        state: str | None = Query(default=None),
        page: int = Query(default=1, ge=1),
        page_size: int = Query(default=20, ge=1, le=200),
    ) -> CandidatePage:
        with lock:
            queue = lp.load_review_queue(outdir)
        rows = _ordered(queue, state)
        total = len(rows)
        pages = max(1, -(-total // page_size))
        start = (page - 1) * page_size
        return CandidatePage(
            total=total, page=page, page_size=page_size, pages=pages,
            candidates=[_candidate_out(c) for c in rows[start:start + page_size]],
        )

    @app.post("/api/decisions", response_model=DecisionOut)
    def post_decision(
        body: DecisionIn,
        x_reviewer_id: str | None = Header(default=None),
    ) -> DecisionOut:
        reviewer = (x_reviewer_id or "").strip()
        if not reviewer:
            raise HTTPException(400, "missing x-reviewer-id header")
        for text in (reviewer, body.note):
            # the decision log is tab separated, one decision per line
            if "\t" in text or "\n" in text:
                raise HTTPException(400, "tabs and newlines not allowed")
        decision = ex.ReviewDecision(
            candidate_id=body.candidate_id,
            reviewer_id=reviewer,
            q1=body.q1_relevant,
            q2=body.q2_relation_ok,
            timestamp=datetime.now(timezone.utc).isoformat(),
            note=body.note,
        )
        with lock:
            queue = lp.load_review_queue(outdir)
            try:
                new_state = queue.submit(decision)
            except ex.ReviewError as err:
                status = 404 if "unknown candidate" in str(err) else 409
                raise HTTPException(status, str(err)) from None
            ex.append_decisions(os.path.join(outdir, "decisions.log"), [decision])
        return DecisionOut(
            candidate_id=body.candidate_id, reviewer_id=reviewer,
            review_state=new_state,
        )

    @app.get("/api/status", response_model=StatusOut)
    def status() -> StatusOut:
        with lock:
            queue = lp.load_review_queue(outdir)
            period = lp.latest_period(outdir)
            history = lp._parse_metrics(outdir, period)
        last = history[-1] if history else None
        counts = {s: 0 for s in PENDING_STATES + DECIDED_STATES}
        for c in queue.candidates.values():
            counts[c.review_state] += 1
        return StatusOut(
            run=run_id, period=period,
            nodes=last.nodes if last else 0,
            edges=last.edges if last else 0,
            precision=last.precision if last else 0.0,
            recall=last.recall if last else 0.0,
            f1=last.f1 if last else 0.0,
            candidates=counts,
            decisions=len(queue.decisions),
        )

    @app.get("/api/report/{run}", response_class=PlainTextResponse)
    def report(run: str) -> str:
        if run != run_id:
            raise HTTPException(404, f"unknown run {run!r}")
        with lock:
            return build_report(outdir)

    return app
