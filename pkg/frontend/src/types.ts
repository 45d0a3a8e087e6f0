// Wire types mirrored from the API module's documented payloads.

export type EventKind =
  | 'chat_message'
  | 'goal_update'
  | 'workstream_status'
  | 'report_updated'
  | 'alert'
  | 'final_answer';

export interface ProjectEvent {
  event_id: number;
  kind: EventKind;
  payload: Record<string, unknown>;
  at: number;
}

export interface ChatEntry {
  message_id: string;
  sender: string;
  text: string;
  attachments: string[];
}

export interface GoalCard {
  id: string;
  text: string;
  status: 'Proposed' | 'Approved';
}

export type WorkstreamStatus =
  | 'Pending'
  | 'Running'
  | 'InReview'
  | 'Completed'
  | 'Failed'
  | 'Unfinished';

export interface WorkstreamCard {
  id: string;
  status: WorkstreamStatus;
  warnings: string[];
  reportVersion: number;
}

export interface AlertEntry {
  message_id: string;
  body: string;
  attachments: string[];
}

// structured report document

export interface Block {
  id: string;
  kind: 'heading' | 'paragraph' | 'theorem' | 'proof' | 'code' | 'attachment_ref' | 'exposition';
  text: string;
}

export interface MarginNote {
  id: string;
  block_id: string;
  span: [number, number];
  text: string;
  kind: 'user_suggestion' | 'external_literature' | 'internal_file' | 'computation' | 'reviewer';
  locator: string;
  locator_version: number | null;
  dangling: boolean;
  superseded: boolean;
}

export interface Reference {
  internal?: { path: string; version: number | null };
  external?: { uri: string; title: string | null; verified: boolean };
}

export interface Report {
  workstream_id: string;
  status: 'Incremental' | 'Final';
  blocks: Block[];
  annotations: MarginNote[];
  references: Reference[];
}

// trajectory drill-down rows

export interface ActionRecord {
  agent_id: string;
  step: number;
  kind: 'action' | 'instruction' | 'failure';
  label: string;
  triggering: string[];
  model_call: string | null;
  action: { kind: string; payload: Record<string, unknown> } | null;
  outcome: string;
  at: number;
}

export type ConnectionState = 'live' | 'reconnecting' | 'offline';

export interface ViewModel {
  projectId: string;
  state: string;
  researchQuestion: string;
  chat: ChatEntry[];
  goals: GoalCard[];
  workstreamOrder: string[];
  workstreams: Record<string, WorkstreamCard>;
  alerts: AlertEntry[];
  finalAnswer: { text: string; forced: boolean } | null;
  lastEventId: number;
  connection: ConnectionState;
  focusChat: boolean;
}
