// Secondary acceptance: the recorded S1 event fixture, rendered with no
// live backend, shows the walkthrough exactly.

import { readFileSync } from 'node:fs';
import { dirname, join } from 'node:path';
import { fileURLToPath } from 'node:url';
import { expect, it } from 'vitest';

import { renderApp, renderReport, renderTrajectory } from '../src/render.js';
import { applyEvents, emptyViewModel } from '../src/viewmodel.js';
import type { ActionRecord, ProjectEvent, Report } from '../src/types.js';

const here = dirname(fileURLToPath(import.meta.url));
const EVENTS: ProjectEvent[] = JSON.parse(
  readFileSync(join(here, '..', 'fixtures', 's1.events.json'), 'utf-8'),
);
const SNAPSHOT = JSON.parse(
  readFileSync(join(here, '..', 'fixtures', 's1.snapshot.json'), 'utf-8'),
);

it('criterion 9: fixture render shows chat, badges, margin note, and drill-down', () => {
  const vm = emptyViewModel('p1');
  applyEvents(vm, EVENTS);

  // chat thread reproduced in order
  expect(vm.chat.map((c) => c.sender)).toEqual(
    ['user', 'pc', 'user', 'pc', 'pc', 'user', 'pc', 'pc'],
  );
  const page = renderApp(vm);
  expect(page).toContain('Focus on both variants');

  // three cards: tick / prominent warning / running
  expect(vm.workstreamOrder).toEqual(['ws1', 'ws2', 'ws3']);
  const cards = page.split('<div class="ws-card"').slice(1) as [string, string, string];
  expect(cards[0]).toContain('class="tick"');
  expect(cards[1]).toContain('class="warning prominent"');
  expect(cards[2]).toContain('data-status="Running"');

  // margin note anchored beside the pruning paragraph
  const report = SNAPSHOT.reports.ws1 as Report;
  const note = report.annotations[0]!;
  const anchorBlock = report.blocks.find((b) => b.id === note.block_id)!;
  expect(anchorBlock.text).toContain('Pruning');
  const reportHtml = renderReport(report, 'p1');
  const row = reportHtml
    .split('<div class="report-row"')
    .find((chunk) => chunk.includes(`data-block-id="${note.block_id}"`))!;
  expect(row).toContain('class="margin-note');
  expect(row).toContain('user_suggestion');

  // eight drill-down rows
  const records = SNAPSHOT.trajectories.ws1 as ActionRecord[];
  const drill = renderTrajectory('ws1', records);
  expect(drill.match(/<details/g)).toHaveLength(8);

  console.log('PASS criterion 9: fixture-rendered UI matches the walkthrough');
});
