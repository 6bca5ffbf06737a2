// Payload shapes for the platform JSON API. The UI renders these as-is and
// never derives clinical values of its own.

export type Role = "patient" | "doctor";

export interface SessionUser {
  id: string;
  name: string;
  role: Role;
}

export interface LoginResponse {
  token: string;
  user: SessionUser;
}

export interface StudyMetaInfo {
  ed_frame: number | null;
  es_frame: number | null;
  patient_id: string;
}

export type StudyStatus = "uploaded" | "analyzed" | "failed";

export interface Study {
  id: string;
  owner_id: string;
  owner_name: string;
  status: StudyStatus;
  meta: StudyMetaInfo;
  dims: number[];
  spacing: number[];
  shared_with: string[];
  error: { stage?: string; error?: string } | null;
  created: number;
}

export interface Report {
  study_id: string;
  created: number;
  final: string;
  initial: string;
  probabilities: Record<string, number>;
  expert_used: boolean;
  decision_value: number | null;
  features: Record<string, number>;
  feature_warnings: string[];
  explanation: string;
  warnings: string[];
  ed_frame: number;
  es_frame: number;
  lv_center: number[];
  overlays: Record<string, string[]>;
  elapsed_seconds: number;
}

export type CommentKind = "recommendation" | "model_feedback";

export interface CommentItem {
  id: string;
  study_id: string;
  owner_id: string;
  author_id: string;
  author_name: string;
  body: string;
  kind: CommentKind;
  created: number;
  unread: boolean;
}

export interface Doctor {
  id: string;
  name: string;
  profile_link: string | null;
}
