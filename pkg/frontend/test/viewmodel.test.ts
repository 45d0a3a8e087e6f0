// View-model reduction over the recorded S1 event fixture: the final
// state must show the walkthrough's three workstreams with the right
// badges, the full chat thread, and exactly one alert -- with reconnects
// landing on the identical state.

import { readFileSync } from 'node:fs';
import { dirname, join } from 'node:path';
import { fileURLToPath } from 'node:url';
import { describe, expect, it } from 'vitest';

import { parseSseBuffer } from '../src/api.js';
import {
  applyEvent,
  applyEvents,
  approvalDecisions,
  emptyViewModel,
  hydrate,
} from '../src/viewmodel.js';
import type { ProjectEvent } from '../src/types.js';

const here = dirname(fileURLToPath(import.meta.url));
const EVENTS: ProjectEvent[] = JSON.parse(
  readFileSync(join(here, '..', 'fixtures', 's1.events.json'), 'utf-8'),
);
const SNAPSHOT = JSON.parse(
  readFileSync(join(here, '..', 'fixtures', 's1.snapshot.json'), 'utf-8'),
);

function reduced() {
  const vm = emptyViewModel('p1');
  applyEvents(vm, EVENTS);
  return vm;
}

describe('event reduction', () => {
  it('replays the fixture into the expected terminal view', () => {
    const vm = reduced();
    expect(vm.workstreamOrder).toEqual(['ws1', 'ws2', 'ws3']);
    expect(vm.workstreams['ws1']!.status).toBe('Completed');
    expect(vm.workstreams['ws2']!.status).toBe('Unfinished');
    expect(vm.workstreams['ws2']!.warnings.length).toBeGreaterThan(0);
    expect(vm.workstreams['ws3']!.status).toBe('Running');
    expect(vm.alerts).toHaveLength(1);
    expect(vm.state).toBe('Active');
    expect(vm.chat.length).toBe(8);
    expect(vm.chat[0]!.sender).toBe('user');
    expect(vm.lastEventId).toBe(EVENTS.length);
  });

  it('report versions track report_updated events', () => {
    const vm = reduced();
    expect(vm.workstreams['ws1']!.reportVersion).toBeGreaterThanOrEqual(3);
  });

  it('alerts pull focus to the chat', () => {
    const vm = emptyViewModel('p1');
    const upToAlert = EVENTS.filter(
      (e) => e.event_id <= EVENTS.find((x) => x.kind === 'alert')!.event_id,
    );
    applyEvents(vm, upToAlert);
    expect(vm.focusChat).toBe(true);
  });

  it('reconnect mid-fixture reaches the identical final state', () => {
    const direct = reduced();
    for (const cut of [5, 17, 30]) {
      const vm = emptyViewModel('p1');
      applyEvents(vm, EVENTS.slice(0, cut));
      // resume: server replays everything after last_seen, including
      // overlap; duplicates must be ignored
      const resumed = EVENTS.filter((e) => e.event_id > vm.lastEventId - 2);
      applyEvents(vm, resumed);
      expect(vm).toEqual({ ...direct, focusChat: vm.focusChat });
    }
  });

  it('duplicate events are ignored, gaps rejected', () => {
    const vm = emptyViewModel('p1');
    expect(applyEvent(vm, EVENTS[0]!)).toBe(true);
    expect(applyEvent(vm, EVENTS[0]!)).toBe(false);
    expect(() => applyEvent(vm, EVENTS[5]!)).toThrow(/gap/);
  });

  it('hydrating from the API snapshot matches the event replay', () => {
    const fromSnapshot = hydrate('p1', SNAPSHOT.project);
    const fromEvents = reduced();
    expect(fromSnapshot.workstreamOrder).toEqual(fromEvents.workstreamOrder);
    for (const id of fromSnapshot.workstreamOrder) {
      expect(fromSnapshot.workstreams[id]!.status)
        .toBe(fromEvents.workstreams[id]!.status);
    }
    expect(fromSnapshot.chat).toEqual(fromEvents.chat);
    expect(fromSnapshot.alerts).toEqual(fromEvents.alerts);
    expect(fromSnapshot.lastEventId).toBe(fromEvents.lastEventId);
  });
});

describe('sse parsing', () => {
  it('parses whole frames and keeps partial ones buffered', () => {
    const frame = (event: ProjectEvent) =>
      `id: ${event.event_id}\nevent: ${event.kind}\ndata: ${JSON.stringify(event)}\n\n`;
    const whole = frame(EVENTS[0]!) + frame(EVENTS[1]!);
    const partial = frame(EVENTS[2]!).slice(0, 25);
    const { events, rest } = parseSseBuffer(whole + partial);
    expect(events.map((e) => e.event_id)).toEqual([1, 2]);
    expect(rest).toBe(partial);
  });
});

describe('goal approval payload', () => {
  it('sends only user decisions', () => {
    expect(approvalDecisions(['g1', 'g3'])).toEqual({ g1: 'approve', g3: 'approve' });
  });
});
