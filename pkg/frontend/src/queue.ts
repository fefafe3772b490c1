import type { TriageApi } from './api.js';
import type {
  Candidate,
  CandidateDetail,
  Decision,
  JobStatus,
  RetrainJob,
  RunSummary,
} from './types.js';

/** Banner over the queue: idle, a label-send failure awaiting retry, or a
 * retrain job being tracked to completion. */
export type Banner =
  | { kind: 'idle' }
  | { kind: 'flush-error'; message: string; queued: number }
  | {
      kind: 'job';
      jobId: string;
      status: JobStatus;
      stage: string | null;
      error: string | null;
      resultRunId: string | null;
    };

export interface PendingLabel {
  objectId: string;
  decision: Decision;
}

export interface GroupOption {
  name: string;
  count: number;
  eligible: boolean;
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

/** Walks the ranked candidate list of one run.
 *
 * Invariants kept here:
 * - the cursor always points at a fetched candidate (pages load on demand);
 * - labels are applied optimistically and queued in a pending buffer that
 *   drains with one in-flight POST at a time — a failed POST keeps the
 *   label buffered and raises a retryable banner, so nothing is lost;
 * - the pending buffer must be empty before navigating to another run or
 *   launching a retrain.
 */
export class ReviewQueue {
  run: RunSummary | null = null;
  filter: string | undefined;
  banner: Banner = { kind: 'idle' };

  private candidates: Candidate[] = [];
  private total = 0;
  private cursor = 0;
  private pending: PendingLabel[] = [];
  private flushPromise: Promise<void> | null = null;

  constructor(
    private readonly api: TriageApi,
    readonly reviewer: string,
    readonly pageSize = 50,
  ) {}

  get runId(): string | null {
    return this.run?.run_id ?? null;
  }

  get cursorIndex(): number {
    return this.cursor;
  }

  get fetchedCount(): number {
    return this.candidates.length;
  }

  get totalCount(): number {
    return this.total;
  }

  get pendingCount(): number {
    return this.pending.length;
  }

  /** Switch to a run (optionally filtered). Unsent labels are flushed
   * first; if they still cannot be sent the navigation is refused. */
  async openRun(run: RunSummary, filter?: string): Promise<void> {
    await this.flush();
    if (this.pending.length > 0) {
      throw new Error('unsent labels pending; retry the flush before switching runs');
    }
    this.run = run;
    this.filter = filter;
    this.candidates = [];
    this.total = 0;
    this.cursor = 0;
    this.banner = { kind: 'idle' };
    await this.fetchNextPage();
  }

  private async fetchNextPage(): Promise<void> {
    if (this.run === null) throw new Error('no run open');
    const page = Math.floor(this.candidates.length / this.pageSize) + 1;
    const doc = await this.api.listCandidates(this.run.run_id, {
      page,
      size: this.pageSize,
      filter: this.filter,
    });
    this.total = doc.total;
    this.candidates.push(...doc.candidates);
  }

  current(): Candidate | null {
    return this.candidates[this.cursor] ?? null;
  }

  /** Detail payload (curves included) for the candidate under the cursor. */
  async currentDetail(): Promise<CandidateDetail | null> {
    const cand = this.current();
    if (cand === null || this.run === null) return null;
    return this.api.getCandidate(this.run.run_id, cand.object_id);
  }

  /** Move the cursor forward, loading the next page when needed so the
   * cursor never points past the fetched list. False at the end. */
  async advance(): Promise<boolean> {
    if (this.run === null) return false;
    if (this.cursor + 1 >= this.candidates.length) {
      if (this.candidates.length >= this.total) return false;
      await this.fetchNextPage();
      if (this.cursor + 1 >= this.candidates.length) return false;
    }
    this.cursor += 1;
    return true;
  }

  /** Move the cursor back one position. */
  retreat(): boolean {
    if (this.cursor === 0) return false;
    this.cursor -= 1;
    return true;
  }

  /** Advance until the cursor sits on an unreviewed candidate. */
  async advanceToUnreviewed(): Promise<boolean> {
    while (this.current() !== null && this.current()!.triage_label !== 'unreviewed') {
      if (!(await this.advance())) return false;
    }
    return this.current() !== null;
  }

  /** Record a decision for the current candidate and advance.
   *
   * Non-skip decisions are applied to the local candidate immediately
   * (optimistic), pushed onto the pending buffer, and the buffer starts
   * draining in the background. `skip` persists nothing and only moves
   * the cursor. Returns whether the cursor moved.
   */
  async tagAndAdvance(decision: Decision): Promise<boolean> {
    const cand = this.current();
    if (cand === null) return false;
    if (decision !== 'skip') {
      cand.triage_label = decision;
      this.pending.push({ objectId: cand.object_id, decision });
      void this.flush();
    }
    return this.advance();
  }

  /** Drain the pending buffer, one POST in flight at a time. A failure
   * leaves the failed label at the head of the buffer and raises the
   * flush-error banner; calling flush() again retries. */
  flush(): Promise<void> {
    this.flushPromise ??= this.drain().finally(() => {
      this.flushPromise = null;
    });
    return this.flushPromise;
  }

  private async drain(): Promise<void> {
    while (this.pending.length > 0) {
      const head = this.pending[0]!;
      const runId = this.runId;
      if (runId === null) return;
      try {
        await this.api.postLabel(runId, head.objectId, head.decision, this.reviewer);
      } catch (err) {
        this.banner = {
          kind: 'flush-error',
          message: err instanceof Error ? err.message : String(err),
          queued: this.pending.length,
        };
        return;
      }
      this.pending.shift();
      if (this.banner.kind === 'flush-error') this.banner = { kind: 'idle' };
    }
  }

  /** Artifact groups visible so far (fetched candidates, including
   * optimistic labels), with live counts against the run's minimum. */
  artifactGroups(): GroupOption[] {
    const min = this.run?.min_artifact_group ?? 5;
    const counts = new Map<string, number>();
    for (const cand of this.candidates) {
      if (!cand.triage_label.startsWith('artifact:')) continue;
      const name = cand.triage_label.slice('artifact:'.length);
      counts.set(name, (counts.get(name) ?? 0) + 1);
    }
    return [...counts.entries()]
      .map(([name, count]) => ({ name, count, eligible: count >= min }))
      .sort((a, b) => b.count - a.count || a.name.localeCompare(b.name));
  }

  /** Submit a retrain over the named groups and track the job in the
   * banner at a fixed polling interval until it finishes. Resolves with
   * the terminal job; a failed job leaves its stage in the banner. */
  async launchRetrain(groups: string[], pollIntervalMs = 1500): Promise<RetrainJob> {
    if (this.run === null) throw new Error('no run open');
    if (groups.length === 0) throw new Error('select at least one artifact group');
    const options = new Map(this.artifactGroups().map((g) => [g.name, g]));
    for (const name of groups) {
      const opt = options.get(name);
      if (opt === undefined || !opt.eligible) {
        throw new Error(
          `artifact group '${name}' has ${opt?.count ?? 0} member(s); ` +
            `minimum is ${this.run.min_artifact_group}`,
        );
      }
    }
    await this.flush();
    if (this.pending.length > 0) {
      throw new Error('unsent labels pending; retry the flush before retraining');
    }

    let job = await this.api.startRetrain(this.run.run_id, groups);
    this.trackJob(job);
    while (job.status !== 'done' && job.status !== 'failed') {
      await sleep(pollIntervalMs);
      job = await this.api.getJob(job.job_id);
      this.trackJob(job);
    }
    return job;
  }

  private trackJob(job: RetrainJob): void {
    this.banner = {
      kind: 'job',
      jobId: job.job_id,
      status: job.status,
      stage: job.stage,
      error: job.error,
      resultRunId: job.result_run_id,
    };
  }

  /** After a job banner reaches `done`, switch the queue to the new run.
   * Returns false when there is no finished job to follow. */
  async openResultRun(): Promise<boolean> {
    if (this.banner.kind !== 'job' || this.banner.status !== 'done') return false;
    const resultId = this.banner.resultRunId;
    if (resultId === null) return false;
    const runs = await this.api.listRuns();
    const next = runs.find((r) => r.run_id === resultId);
    if (next === undefined) return false;
    await this.openRun(next);
    return true;
  }
}
