// Thin client over the documented API plus a resumable SSE subscription.
// The stream resumes from the last seen event id on reconnect, so the
// view never gaps or double-applies; connection loss is surfaced to the
// UI as a state change, retried with exponential backoff.

import type { ActionRecord, ProjectEvent, Report } from './types.js';

export class ApiClient {
  constructor(readonly baseUrl: string = '') {}

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await fetch(this.baseUrl + path, {
      headers: { 'Content-Type': 'application/json' },
      ...init,
    });
    if (!response.ok) {
      throw new Error(`${path}: ${response.status} ${await response.text()}`);
    }
    return (await response.json()) as T;
  }

  getProject(projectId: string): Promise<any> {
    return this.json(`/v1/projects/${projectId}`);
  }

  getWorkstreams(projectId: string): Promise<any[]> {
    return this.json(`/v1/projects/${projectId}/workstreams`);
  }

  getReport(wsId: string): Promise<Report> {
    return this.json(`/v1/workstreams/${wsId}/report?format=structured`);
  }

  getTrajectory(wsId: string): Promise<ActionRecord[]> {
    return this.json(`/v1/workstreams/${wsId}/trajectory`);
  }

  getReview(wsId: string): Promise<any> {
    return this.json(`/v1/workstreams/${wsId}/review`);
  }

  sendChat(projectId: string, text: string): Promise<{ message_id: string }> {
    return this.json(`/v1/projects/${projectId}/chat`, {
      method: 'POST',
      body: JSON.stringify({ text }),
    });
  }

  approveGoals(projectId: string, decisions: Record<string, unknown>): Promise<any> {
    return this.json(`/v1/projects/${projectId}/goals`, {
      method: 'POST',
      body: JSON.stringify({ decisions }),
    });
  }

  fileUrl(projectId: string, path: string, version?: number | null): string {
    const suffix = version ? `?version=${version}` : '';
    return `${this.baseUrl}/v1/projects/${projectId}/files/${path}${suffix}`;
  }
}

// SSE frame parsing, kept pure for tests. Frames are
// "id: N\nevent: kind\ndata: {json}\n\n"; partial input stays buffered.
export function parseSseBuffer(buffer: string): { events: ProjectEvent[]; rest: string } {
  const events: ProjectEvent[] = [];
  let rest = buffer;
  for (;;) {
    const cut = rest.indexOf('\n\n');
    if (cut < 0) {
      break;
    }
    const frame = rest.slice(0, cut);
    rest = rest.slice(cut + 2);
    const dataLine = frame.split('\n').find((line) => line.startsWith('data: '));
    if (dataLine) {
      events.push(JSON.parse(dataLine.slice('data: '.length)) as ProjectEvent);
    }
  }
  return { events, rest };
}

export interface Subscription {
  stop(): void;
}

export function connectEvents(
  client: ApiClient,
  projectId: string,
  lastSeen: number,
  onEvent: (event: ProjectEvent) => void,
  onConnection: (state: 'live' | 'reconnecting' | 'offline') => void,
): Subscription {
  let stopped = false;
  let cursor = lastSeen;
  let attempt = 0;

  async function loop(): Promise<void> {
    while (!stopped) {
      try {
        const response = await fetch(
          `${client.baseUrl}/v1/projects/${projectId}/events?after=${cursor}`,
        );
        if (!response.ok || !response.body) {
          throw new Error(`stream failed: ${response.status}`);
        }
        onConnection('live');
        attempt = 0;
        const reader = response.body.getReader();
        const decoder = new TextDecoder();
        let buffer = '';
        for (;;) {
          const { done, value } = await reader.read();
          if (done || stopped) {
            break;
          }
          buffer += decoder.decode(value, { stream: true });
          const parsed = parseSseBuffer(buffer);
          buffer = parsed.rest;
          for (const event of parsed.events) {
            if (event.event_id > cursor) {
              cursor = event.event_id;
              onEvent(event);
            }
          }
        }
      } catch {
        // fall through to retry
      }
      if (stopped) {
        return;
      }
      attempt += 1;
      onConnection(attempt > 5 ? 'offline' : 'reconnecting');
      await new Promise((resolve) =>
        setTimeout(resolve, Math.min(100 * 2 ** attempt, 5000)),
      );
    }
  }

  void loop();
  return {
    stop() {
      stopped = true;
    },
  };
}
