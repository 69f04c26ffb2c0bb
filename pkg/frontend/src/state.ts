import type {
  ChatEvent,
  ChatRequest,
  RagToggles,
  TranscriptEntry,
} from "./types.js";

export type ConnectionStatus = "connected" | "disconnected";

/**
 * All UI state lives here so stream handling can be tested without a DOM.
 * The rendered transcript is exactly the concatenation of received token
 * events for each assistant entry.
 */
export class ChatState {
  readonly sessionId: string;
  model = "";
  toggles: RagToggles = {
    python: true,
    markdown: true,
    discourse: true,
    scene: true,
    history: false,
  };
  sceneXml = "";
  transcript: TranscriptEntry[] = [];
  streaming = false;
  connection: ConnectionStatus = "disconnected";

  constructor(sessionId?: string) {
    this.sessionId = sessionId ?? randomSessionId();
  }

  canSubmit(prompt: string): boolean {
    return !this.streaming && prompt.trim().length > 0;
  }

  buildRequest(prompt: string): ChatRequest {
    const request: ChatRequest = {
      session_id: this.sessionId,
      prompt,
      rag: { ...this.toggles },
      model: this.model,
    };
    if (this.sceneXml.trim()) {
      request.scene_xml = this.sceneXml;
    }
    return request;
  }

  beginExchange(prompt: string): void {
    this.transcript.push({ role: "user", text: prompt });
    this.transcript.push({ role: "assistant", text: "" });
    this.streaming = true;
  }

  applyEvent(event: ChatEvent): void {
    const entry = this.transcript[this.transcript.length - 1];
    if (!entry || entry.role !== "assistant") return;
    if (event.type === "token") {
      entry.text += event.text;
    } else if (event.type === "eos") {
      entry.stats = event.stats;
      this.streaming = false;
    } else {
      entry.error = event.message;
      this.streaming = false;
    }
  }

  abort(message: string): void {
    this.applyEvent({ type: "error", message });
    this.streaming = false;
  }

  assistantText(): string {
    for (let i = this.transcript.length - 1; i >= 0; i--) {
      if (this.transcript[i].role === "assistant") return this.transcript[i].text;
    }
    return "";
  }

  resetTranscript(): void {
    this.transcript = [];
  }
}

export function randomSessionId(): string {
  const bytes = new Uint8Array(8);
  crypto.getRandomValues(bytes);
  return (
    "tab-" +
    Array.from(bytes, (b) => b.toString(16).padStart(2, "0")).join("")
  );
}
