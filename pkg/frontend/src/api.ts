import { createNdjsonParser } from "./ndjson.js";
import type { ChatEvent, ChatRequest, ModelInfo } from "./types.js";

export type FetchLike = typeof fetch;

export interface HealthInfo {
  status: string;
  index_chunks: number;
}

export async function fetchHealth(
  base: string,
  fetchImpl: FetchLike = fetch,
): Promise<HealthInfo> {
  const resp = await fetchImpl(`${base}/api/health`);
  if (!resp.ok) throw new Error(`health check failed: HTTP ${resp.status}`);
  return (await resp.json()) as HealthInfo;
}

export async function fetchModels(
  base: string,
  fetchImpl: FetchLike = fetch,
): Promise<ModelInfo[]> {
  const resp = await fetchImpl(`${base}/api/models`);
  if (!resp.ok) throw new Error(`model list failed: HTTP ${resp.status}`);
  return (await resp.json()) as ModelInfo[];
}

export async function resetSession(
  base: string,
  sessionId: string,
  fetchImpl: FetchLike = fetch,
): Promise<boolean> {
  const resp = await fetchImpl(`${base}/api/session/reset`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ session_id: sessionId }),
  });
  if (!resp.ok) return false;
  const body = (await resp.json()) as { ok: boolean };
  return body.ok === true;
}

/**
 * POST a chat request and invoke onEvent for every NDJSON line as it
 * arrives, regardless of how the transport fragments the body.
 */
export async function streamChat(
  base: string,
  request: ChatRequest,
  onEvent: (event: ChatEvent) => void,
  fetchImpl: FetchLike = fetch,
): Promise<void> {
  const resp = await fetchImpl(`${base}/api/chat`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(request),
  });
  if (!resp.ok || !resp.body) {
    throw new Error(`chat request failed: HTTP ${resp.status}`);
  }
  const parser = createNdjsonParser((msg) => onEvent(msg as ChatEvent));
  const reader = resp.body.getReader();
  const decoder = new TextDecoder();
  for (;;) {
    const { done, value } = await reader.read();
    if (done) break;
    parser.push(decoder.decode(value, { stream: true }));
  }
  parser.push(decoder.decode());
  parser.flush();
}
