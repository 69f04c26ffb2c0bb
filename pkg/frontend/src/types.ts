export interface RagToggles {
  python: boolean;
  markdown: boolean;
  discourse: boolean;
  scene: boolean;
  history: boolean;
}

export interface ChatRequest {
  session_id: string;
  prompt: string;
  scene_xml?: string;
  rag: RagToggles;
  model: string;
}

export interface EosStats {
  prompt_tokens: number;
  output_tokens: number;
  backend_seconds: number;
  total_seconds: number;
}

export type ChatEvent =
  | { type: "token"; text: string }
  | { type: "eos"; stats: EosStats }
  | { type: "error"; message: string };

export interface ModelInfo {
  id: string;
  kind: string;
  ready: boolean;
}

export interface TranscriptEntry {
  role: "user" | "assistant";
  text: string;
  stats?: EosStats;
  error?: string;
}
