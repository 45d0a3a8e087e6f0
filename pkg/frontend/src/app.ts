// Browser bootstrap: hydrate from the API, subscribe to events, render.
// All truth lives server-side; this file only wires DOM events to API
// calls and re-renders from the view model.

import { ApiClient, connectEvents } from './api.js';
import { renderApp, renderReport, renderTrajectory } from './render.js';
import { applyEvent, approvalDecisions, hydrate } from './viewmodel.js';
import type { ViewModel } from './types.js';

async function main(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const projectId = params.get('project') ?? 'p1';
  const client = new ApiClient(params.get('api') ?? '');
  const root = document.getElementById('app');
  if (!root) {
    throw new Error('missing #app mount point');
  }

  let vm: ViewModel = hydrate(projectId, await client.getProject(projectId));

  const redraw = () => {
    root.innerHTML = renderApp(vm);
    if (vm.focusChat) {
      document.getElementById('chat')?.scrollIntoView({ block: 'end' });
      vm.focusChat = false;
    }
  };
  redraw();

  connectEvents(client, projectId, vm.lastEventId, (event) => {
    try {
      applyEvent(vm, event);
    } catch {
      // gap detected: rebuild from the API rather than guessing
      void client.getProject(projectId).then((summary) => {
        vm = hydrate(projectId, summary);
        redraw();
      });
      return;
    }
    redraw();
  }, (state) => {
    vm.connection = state;
    redraw();
  });

  root.addEventListener('click', (raw) => {
    const target = raw.target as HTMLElement;
    const action = target.dataset.action;
    if (action === 'approve-goal') {
      void client.approveGoals(projectId,
                               approvalDecisions([target.dataset.goal!]));
    } else if (action === 'drill-down') {
      const wsId = target.dataset.ws!;
      void client.getTrajectory(wsId).then((records) => {
        const panel = document.getElementById('drill-down');
        if (panel) {
          panel.innerHTML = renderTrajectory(wsId, records);
        }
      });
      void client.getReport(wsId).then((report) => {
        const panel = document.getElementById('report-view');
        if (panel) {
          panel.innerHTML = renderReport(report, projectId);
        }
      });
    }
  });

  const form = document.getElementById('chat-form') as HTMLFormElement | null;
  form?.addEventListener('submit', (submitEvent) => {
    submitEvent.preventDefault();
    const input = document.getElementById('chat-input') as HTMLInputElement;
    if (input.value.trim()) {
      void client.sendChat(projectId, input.value.trim());
      input.value = '';
    }
  });
}

void main();
