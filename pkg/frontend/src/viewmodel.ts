// Event-sourced view state. The UI never invents status: everything here
// is derived from API responses plus the project event stream, so a page
// refresh rebuilds the identical view from the server alone.

import type {
  AlertEntry,
  ChatEntry,
  GoalCard,
  ProjectEvent,
  ViewModel,
  WorkstreamCard,
  WorkstreamStatus,
} from './types.js';

export function emptyViewModel(projectId: string): ViewModel {
  return {
    projectId,
    state: 'Onboarding',
    researchQuestion: '',
    chat: [],
    goals: [],
    workstreamOrder: [],
    workstreams: {},
    alerts: [],
    finalAnswer: null,
    lastEventId: 0,
    connection: 'live',
    focusChat: false,
  };
}

// Hydrate from GET /v1/projects/{id}; the event stream then takes over
// from summary.event_count.
export function hydrate(projectId: string, summary: any): ViewModel {
  const vm = emptyViewModel(projectId);
  const project = summary.project;
  vm.state = project.state;
  vm.researchQuestion = project.research_question ?? '';
  vm.chat = (project.chat ?? []).map((c: any) => ({
    message_id: c.message_id,
    sender: c.sender,
    text: c.text,
    attachments: c.attachments ?? [],
  }));
  vm.goals = (project.goals ?? []).map((g: any) => ({
    id: g.id,
    text: g.text,
    status: g.status,
  }));
  vm.alerts = (project.alerts ?? []).map((a: any) => ({
    message_id: a.message_id,
    body: a.body,
    attachments: a.attachments ?? [],
  }));
  vm.finalAnswer = project.final_answer
    ? { text: project.final_answer.text, forced: project.final_answer.forced }
    : null;
  for (const ws of summary.workstreams ?? []) {
    vm.workstreamOrder.push(ws.id);
    vm.workstreams[ws.id] = {
      id: ws.id,
      status: ws.status,
      warnings: ws.warnings ?? [],
      reportVersion: ws.report_version ?? 0,
    };
  }
  vm.lastEventId = summary.event_count ?? 0;
  return vm;
}

function upsertGoal(vm: ViewModel, goal: GoalCard): void {
  const existing = vm.goals.find((g) => g.id === goal.id);
  if (existing) {
    existing.text = goal.text;
    existing.status = goal.status;
  } else {
    vm.goals.push(goal);
  }
}

function upsertWorkstream(vm: ViewModel, id: string, status: WorkstreamStatus,
                          warnings: string[]): void {
  if (!vm.workstreams[id]) {
    vm.workstreamOrder.push(id);
    vm.workstreams[id] = { id, status, warnings, reportVersion: 0 };
  } else {
    const card = vm.workstreams[id]!;
    card.status = status;
    card.warnings = warnings;
  }
}

// Returns true when the event advanced the model (duplicates and replays
// below the cursor are ignored, which makes reconnects idempotent).
export function applyEvent(vm: ViewModel, event: ProjectEvent): boolean {
  if (event.event_id <= vm.lastEventId) {
    return false;
  }
  if (event.event_id !== vm.lastEventId + 1) {
    // a gap means the stream and the model disagree; the caller should
    // re-hydrate, but we still refuse to apply out-of-order state
    throw new Error(`event gap: expected ${vm.lastEventId + 1}, got ${event.event_id}`);
  }
  vm.lastEventId = event.event_id;
  const p = event.payload as any;
  switch (event.kind) {
    case 'chat_message': {
      const entry: ChatEntry = {
        message_id: p.message_id,
        sender: p.sender,
        text: p.text,
        attachments: p.attachments ?? [],
      };
      vm.chat.push(entry);
      break;
    }
    case 'goal_update': {
      upsertGoal(vm, { id: p.goal_id, text: p.text, status: p.status });
      if (vm.state === 'Onboarding') {
        vm.state = 'GoalsProposed';
      }
      if (p.status === 'Approved') {
        vm.state = 'Active';
      }
      break;
    }
    case 'workstream_status': {
      upsertWorkstream(vm, p.workstream_id, p.status, p.warnings ?? []);
      break;
    }
    case 'report_updated': {
      const card = vm.workstreams[p.workstream_id];
      if (card) {
        card.reportVersion = p.version;
      } else {
        upsertWorkstream(vm, p.workstream_id, 'Pending', []);
        vm.workstreams[p.workstream_id]!.reportVersion = p.version;
      }
      break;
    }
    case 'alert': {
      const alert: AlertEntry = {
        message_id: p.message_id,
        body: p.body,
        attachments: p.attachments ?? [],
      };
      vm.alerts.push(alert);
      vm.focusChat = true; // alerts pull the user back to the conversation
      break;
    }
    case 'final_answer': {
      vm.finalAnswer = { text: p.text, forced: p.forced };
      break;
    }
  }
  return true;
}

export function applyEvents(vm: ViewModel, events: ProjectEvent[]): number {
  let applied = 0;
  for (const event of events) {
    if (applyEvent(vm, event)) {
      applied += 1;
    }
  }
  return applied;
}

// Goal approval sends user decisions and nothing else.
export function approvalDecisions(goalIds: string[]): Record<string, 'approve'> {
  const decisions: Record<string, 'approve'> = {};
  for (const id of goalIds) {
    decisions[id] = 'approve';
  }
  return decisions;
}
