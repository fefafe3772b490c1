import { ApiClient } from './api.js';
import { ReviewQueue } from './queue.js';
import { renderCandidate } from './render.js';
import type { Decision, RunSummary } from './types.js';

/** Browser entry point: wires the review queue to the page.
 *
 * Keyboard-first: reviewers work thousands of candidates top-down, so
 * every decision is a single key (i interesting, s skip, a artifact group,
 * k known class, n/p navigation, r retrain).
 */

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing element #${id}`);
  return node as T;
}

const params = new URLSearchParams(window.location.search);
const api = new ApiClient(params.get('api') ?? '', {
  token: params.get('token') ?? undefined,
});
const reviewer = params.get('reviewer') ?? localStorage.getItem('reviewer') ?? 'reviewer';
localStorage.setItem('reviewer', reviewer);
const queue = new ReviewQueue(api, reviewer);

let runs: RunSummary[] = [];

async function loadRuns(selectId?: string): Promise<void> {
  runs = await api.listRuns();
  const select = el<HTMLSelectElement>('run-select');
  select.innerHTML = runs
    .map(
      (r) =>
        `<option value="${r.run_id}">${r.run_id} · iter ${r.iteration} · ` +
        `${r.reviewed_count}/${r.candidate_count} reviewed</option>`,
    )
    .join('');
  const target =
    runs.find((r) => r.run_id === selectId) ?? runs[runs.length - 1];
  if (target === undefined) {
    el('candidate').innerHTML = '<div class="panel-notice">no runs found</div>';
    return;
  }
  select.value = target.run_id;
  await queue.openRun(target, currentFilter());
  await queue.advanceToUnreviewed();
  await renderCurrent();
}

function currentFilter(): string | undefined {
  const value = el<HTMLInputElement>('filter-input').value.trim();
  return value === '' ? undefined : value;
}

async function renderCurrent(): Promise<void> {
  renderBanner();
  renderGroups();
  const progress = el('progress');
  const cand = queue.current();
  if (cand === null || queue.run === null) {
    el('candidate').innerHTML = '<div class="panel-notice">end of list</div>';
    progress.textContent = `${queue.totalCount} candidates`;
    return;
  }
  progress.textContent =
    `${queue.cursorIndex + 1} / ${queue.totalCount}` +
    (queue.pendingCount > 0 ? ` · ${queue.pendingCount} unsent` : '');
  try {
    const detail = await queue.currentDetail();
    if (detail !== null) {
      el('candidate').innerHTML = renderCandidate(detail, queue.run.class_names);
    }
  } catch (err) {
    el('candidate').innerHTML =
      `<div class="panel-notice">${err instanceof Error ? err.message : String(err)}</div>`;
  }
}

function renderGroups(): void {
  const groups = queue.artifactGroups();
  el('group-options').innerHTML = groups
    .map((g) => `<option value="${g.name}">`)
    .join('');
  el('group-list').innerHTML =
    groups
      .map(
        (g) =>
          `<label class="group-row${g.eligible ? '' : ' ineligible'}" ` +
          `title="${g.eligible ? '' : `needs ${queue.run?.min_artifact_group ?? 5}+ members`}">` +
          `<input type="checkbox" class="group-check" value="${g.name}" ${g.eligible ? '' : 'disabled'}>` +
          `${g.name} <span class="group-count">${g.count}</span></label>`,
      )
      .join('') || '<span class="muted">no artifact groups yet</span>';
  const checked = selectedGroups();
  el<HTMLButtonElement>('retrain-btn').disabled = checked.length === 0;
}

function selectedGroups(): string[] {
  return [...document.querySelectorAll<HTMLInputElement>('.group-check:checked')].map(
    (box) => box.value,
  );
}

function renderBanner(): void {
  const banner = el('banner');
  const b = queue.banner;
  if (b.kind === 'idle') {
    banner.className = 'banner hidden';
    banner.innerHTML = '';
  } else if (b.kind === 'flush-error') {
    banner.className = 'banner error';
    banner.innerHTML =
      `label send failed (${b.queued} queued): ${b.message} ` +
      '<button id="retry-flush">retry</button>';
    el('retry-flush').onclick = async () => {
      await queue.flush();
      await renderCurrent();
    };
  } else {
    banner.className = `banner job ${b.status}`;
    if (b.status === 'failed') {
      banner.textContent = `retrain ${b.jobId} failed` + (b.stage ? ` at stage ${b.stage}` : '') + `: ${b.error ?? ''}`;
    } else if (b.status === 'done') {
      banner.innerHTML =
        `retrain ${b.jobId} done → ${b.resultRunId} ` +
        '<button id="open-result">open new run</button>';
      el('open-result').onclick = async () => {
        if (await queue.openResultRun()) {
          await loadRuns(queue.runId ?? undefined);
        }
      };
    } else {
      banner.textContent = `retrain ${b.jobId}: ${b.status}…`;
    }
  }
}

async function tag(decision: Decision): Promise<void> {
  await queue.tagAndAdvance(decision);
  await renderCurrent();
}

function focusInput(id: string): void {
  el<HTMLInputElement>(id).focus();
}

async function launchRetrain(): Promise<void> {
  const groups = selectedGroups();
  const note = el('retrain-note');
  note.textContent = '';
  try {
    const poll = queue.launchRetrain(groups);
    const timer = setInterval(renderBanner, 300);
    await poll.finally(() => clearInterval(timer));
  } catch (err) {
    note.textContent = err instanceof Error ? err.message : String(err);
  }
  renderBanner();
}

document.addEventListener('keydown', (event) => {
  const target = event.target as HTMLElement;
  if (target.tagName === 'INPUT' || target.tagName === 'SELECT') {
    if (event.key === 'Escape') (target as HTMLInputElement).blur();
    return;
  }
  switch (event.key.toLowerCase()) {
    case 'i':
      void tag('interesting');
      break;
    case 's':
      void tag('skip');
      break;
    case 'a':
      event.preventDefault();
      focusInput('group-input');
      break;
    case 'k':
      event.preventDefault();
      focusInput('known-input');
      break;
    case 'n':
      void queue.advance().then(renderCurrent);
      break;
    case 'p':
      queue.retreat();
      void renderCurrent();
      break;
    case 'r':
      void launchRetrain();
      break;
  }
});

el<HTMLInputElement>('group-input').addEventListener('keydown', (event) => {
  if (event.key !== 'Enter') return;
  const input = event.target as HTMLInputElement;
  const name = input.value.trim();
  if (name === '') return;
  input.value = '';
  input.blur();
  void tag(`artifact:${name}`);
});

el<HTMLInputElement>('known-input').addEventListener('keydown', (event) => {
  if (event.key !== 'Enter') return;
  const input = event.target as HTMLInputElement;
  const name = input.value.trim();
  if (name === '') return;
  input.value = '';
  input.blur();
  void tag(`known:${name}`);
});

el<HTMLSelectElement>('run-select').addEventListener('change', (event) => {
  void loadRuns((event.target as HTMLSelectElement).value);
});

el<HTMLInputElement>('filter-input').addEventListener('change', () => {
  void loadRuns(queue.runId ?? undefined);
});

el<HTMLButtonElement>('retrain-btn').addEventListener('click', () => {
  void launchRetrain();
});

void loadRuns();
