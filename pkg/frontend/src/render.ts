// HTML string renderers. Keeping these as pure string functions lets the
// fixture tests assert on exact markup with no DOM, and the browser
// bootstrap mounts the same strings via innerHTML.

import type {
  ActionRecord,
  Block,
  MarginNote,
  Report,
  ViewModel,
  WorkstreamCard,
} from './types.js';

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, '&amp;')
    .replace(/</g, '&lt;')
    .replace(/>/g, '&gt;')
    .replace(/"/g, '&quot;');
}

// --- chat -----------------------------------------------------------------

export function renderChat(vm: ViewModel): string {
  const rows = vm.chat.map((entry) => {
    const who = entry.sender === 'user' ? 'you' : 'coordinator';
    const attachments = entry.attachments.length
      ? `<span class="attachments">${entry.attachments.map(escapeHtml).join(', ')}</span>`
      : '';
    return `<div class="chat-entry ${who}"><span class="sender">${who}</span>` +
      `<p>${escapeHtml(entry.text)}</p>${attachments}</div>`;
  });
  return `<section class="chat" id="chat">${rows.join('')}</section>`;
}

// --- goals -----------------------------------------------------------------

export function renderGoals(vm: ViewModel): string {
  if (!vm.goals.length) {
    return '<section class="goals"></section>';
  }
  const cards = vm.goals.map((goal) => {
    const control = goal.status === 'Proposed'
      ? `<button data-action="approve-goal" data-goal="${goal.id}">Approve</button>`
      : '<span class="approved-mark">approved</span>';
    return `<div class="goal-card ${goal.status.toLowerCase()}" data-goal-id="${goal.id}">` +
      `<span class="goal-id">${goal.id}</span><p>${escapeHtml(goal.text)}</p>${control}</div>`;
  });
  return `<section class="goals">${cards.join('')}</section>`;
}

// --- workstream cards --------------------------------------------------------

const STATUS_BADGES: Record<string, string> = {
  Pending: 'badge pending',
  Running: 'badge running',
  InReview: 'badge in-review',
  Completed: 'badge completed',
  Failed: 'badge failed',
  Unfinished: 'badge unfinished',
};

export function renderWorkstreamCard(card: WorkstreamCard): string {
  const badge = `<span class="${STATUS_BADGES[card.status] ?? 'badge'}">${card.status}</span>`;
  const tick = card.status === 'Completed' ? '<span class="tick">&#10003;</span>' : '';
  const warning = card.warnings.length
    ? `<div class="warning prominent">${escapeHtml(card.warnings[card.warnings.length - 1]!)}</div>`
    : '';
  const report = card.reportVersion
    ? `<a class="report-link" href="/v1/workstreams/${card.id}/report?format=markdown">` +
      `report v${card.reportVersion}</a>`
    : '';
  const drill = `<button data-action="drill-down" data-ws="${card.id}">details</button>`;
  return `<div class="ws-card" data-ws-id="${card.id}" data-status="${card.status}">` +
    `<h3>${card.id}${tick}</h3>${badge}${warning}${report}${drill}</div>`;
}

export function renderWorkstreams(vm: ViewModel): string {
  const cards = vm.workstreamOrder
    .map((id) => renderWorkstreamCard(vm.workstreams[id]!))
    .join('');
  return `<section class="workstreams">${cards}</section>`;
}

// --- report with margin notes ---------------------------------------------

function blockBody(block: Block): string {
  const text = escapeHtml(block.text);
  switch (block.kind) {
    case 'heading':
      return `<h2>${text}</h2>`;
    case 'theorem':
      return `<p><strong>Theorem.</strong> ${text}</p>`;
    case 'proof':
      return `<p><em>Proof.</em> ${text}</p>`;
    case 'code':
      return `<pre><code>${text}</code></pre>`;
    case 'attachment_ref':
      return `<p class="attachment-ref">${text}</p>`;
    default:
      return `<p>${text}</p>`;
  }
}

function renderNote(note: MarginNote, projectId: string): string {
  const flags = [
    note.dangling || note.superseded ? 'superseded' : '',
  ].filter(Boolean).join(' ');
  const version = note.locator_version ? ` v${note.locator_version}` : '';
  const locator = note.kind === 'external_literature'
    ? `<a href="${escapeHtml(note.locator)}">${escapeHtml(note.locator)}</a>`
    : `<a href="/v1/projects/${projectId}/files/${escapeHtml(note.locator)}` +
      `${note.locator_version ? `?version=${note.locator_version}` : ''}">` +
      `${escapeHtml(note.locator)}${version}</a>`;
  const popover = `<span class="provenance-popover">${note.kind}: ${locator}</span>`;
  return `<aside class="margin-note ${flags}" data-note-id="${note.id}" ` +
    `data-anchor="${note.block_id}" data-span="${note.span[0]}-${note.span[1]}">` +
    `${escapeHtml(note.text)}${popover}</aside>`;
}

export function renderReport(report: Report, projectId: string): string {
  const title = `<h1>Working paper: ${escapeHtml(report.workstream_id)}</h1>`;
  const status = report.status === 'Final'
    ? '<p class="report-status final">final</p>'
    : '';
  if (!report.blocks.length) {
    return `<article class="report">${title}${status}</article>`;
  }
  const rows = report.blocks.map((block) => {
    const notes = report.annotations
      .filter((n) => n.block_id === block.id)
      .map((n) => renderNote(n, projectId))
      .join('');
    return `<div class="report-row" data-block-id="${block.id}">` +
      `<div class="block">${blockBody(block)}</div>` +
      `<div class="margin">${notes}</div></div>`;
  });
  const orphaned = report.annotations
    .filter((n) => !report.blocks.some((b) => b.id === n.block_id))
    .map((n) => renderNote(n, projectId))
    .join('');
  const refs = report.references.map((ref) => {
    if (ref.internal) {
      const v = ref.internal.version ? `?version=${ref.internal.version}` : '';
      return `<li><a href="/v1/projects/${projectId}/files/${escapeHtml(ref.internal.path)}${v}">` +
        `${escapeHtml(ref.internal.path)}</a> (workspace)</li>`;
    }
    const ext = ref.external!;
    const mark = ext.verified ? 'verified' : 'unverified';
    return `<li><a href="${escapeHtml(ext.uri)}">${escapeHtml(ext.title ?? ext.uri)}</a>` +
      ` <span class="${mark}">${mark}</span></li>`;
  });
  const references = refs.length
    ? `<section class="references"><h2>References</h2><ul>${refs.join('')}</ul></section>`
    : '';
  return `<article class="report">${title}${status}${rows.join('')}` +
    `${orphaned ? `<div class="orphaned-notes">${orphaned}</div>` : ''}${references}</article>`;
}

// --- trajectory drill-down ---------------------------------------------------

export function renderTrajectory(wsId: string, records: ActionRecord[]): string {
  if (!records.length) {
    return `<section class="trajectory" data-ws="${wsId}">` +
      '<p class="empty">no actions recorded yet</p></section>';
  }
  const rows = records.map((record) => {
    const call = record.model_call
      ? `<span class="model-call" title="model call">${record.model_call}</span>`
      : '';
    const action = record.action
      ? `<pre class="action-payload">${escapeHtml(JSON.stringify(record.action.payload, null, 2))}</pre>`
      : '';
    // <details> without "open": collapsed by default (progressive disclosure)
    return `<details class="trajectory-row ${record.kind}">` +
      `<summary><span class="step">${record.step}</span> ` +
      `${escapeHtml(record.label)} ${call}</summary>` +
      `<div class="outcome">${escapeHtml(record.outcome)}</div>${action}</details>`;
  });
  return `<section class="trajectory" data-ws="${wsId}">${rows.join('')}</section>`;
}

// --- page assembly -------------------------------------------------------------

export function renderAlertBanner(vm: ViewModel): string {
  if (!vm.alerts.length) {
    return '';
  }
  const latest = vm.alerts[vm.alerts.length - 1]!;
  return `<div class="alert-banner prominent" role="alert">` +
    `${escapeHtml(latest.body)}</div>`;
}

export function renderConnectionBanner(vm: ViewModel): string {
  if (vm.connection === 'live') {
    return '';
  }
  return `<div class="connection-banner ${vm.connection}">` +
    `connection ${vm.connection}...</div>`;
}

export function renderApp(vm: ViewModel): string {
  const question = vm.researchQuestion
    ? `<p class="research-question">${escapeHtml(vm.researchQuestion)}</p>`
    : '';
  const finalAnswer = vm.finalAnswer
    ? `<div class="final-answer">final answer` +
      `${vm.finalAnswer.forced ? ' (forced)' : ''}: ` +
      `${escapeHtml(vm.finalAnswer.text)}</div>`
    : '';
  return [
    renderConnectionBanner(vm),
    renderAlertBanner(vm),
    `<header><h1>${escapeHtml(vm.projectId)}</h1>` +
    `<span class="project-state">${vm.state}</span>${question}</header>`,
    finalAnswer,
    renderChat(vm),
    renderGoals(vm),
    renderWorkstreams(vm),
    '<section id="drill-down"></section>',
    '<section id="report-view"></section>',
  ].join('');
}
