import { fetchHealth, fetchModels, resetSession, streamChat } from "./api.js";
import { ChatState } from "./state.js";
import type { TranscriptEntry } from "./types.js";

const base = "";
const state = new ChatState();

const statusDot = el("status-dot");
const statusText = el("status-text");
const modelSelect = el("model-select") as HTMLSelectElement;
const transcriptBox = el("transcript");
const promptInput = el("prompt-input") as HTMLTextAreaElement;
const sceneInput = el("scene-input") as HTMLTextAreaElement;
const submitButton = el("submit") as HTMLButtonElement;
const resetButton = el("reset") as HTMLButtonElement;
const connectButton = el("connect") as HTMLButtonElement;

const toggleIds = ["python", "markdown", "discourse", "scene", "history"] as const;

function el(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node;
}

function setConnection(connected: boolean, detail = ""): void {
  state.connection = connected ? "connected" : "disconnected";
  statusDot.className = `dot ${connected ? "dot-ok" : "dot-bad"}`;
  statusText.textContent = connected
    ? `connected${detail ? ` (${detail})` : ""}`
    : "disconnected";
}

function renderEntry(entry: TranscriptEntry): HTMLElement {
  const bubble = document.createElement("div");
  bubble.className = `bubble ${entry.role}`;
  const text = document.createElement("pre");
  text.textContent = entry.text;
  bubble.appendChild(text);
  if (entry.error) {
    const err = document.createElement("div");
    err.className = "bubble-error";
    err.textContent = `error: ${entry.error}`;
    bubble.appendChild(err);
  }
  if (entry.stats) {
    const stats = document.createElement("div");
    stats.className = "bubble-stats";
    stats.textContent =
      `${entry.stats.output_tokens} tokens in ` +
      `${entry.stats.total_seconds.toFixed(2)}s ` +
      `(backend ${entry.stats.backend_seconds.toFixed(2)}s)`;
    bubble.appendChild(stats);
  }
  return bubble;
}

function renderTranscript(): void {
  transcriptBox.replaceChildren(...state.transcript.map(renderEntry));
  transcriptBox.scrollTop = transcriptBox.scrollHeight;
}

function syncControls(): void {
  submitButton.disabled = state.streaming;
  resetButton.disabled = state.streaming;
  promptInput.disabled = state.streaming;
}

async function connect(): Promise<void> {
  try {
    const health = await fetchHealth(base);
    const models = await fetchModels(base);
    modelSelect.replaceChildren(
      ...models.map((m) => {
        const option = document.createElement("option");
        option.value = m.id;
        option.textContent = m.ready ? m.id : `${m.id} (down)`;
        option.disabled = !m.ready;
        return option;
      }),
    );
    const first = models.find((m) => m.ready);
    if (first) {
      modelSelect.value = first.id;
      state.model = first.id;
    }
    setConnection(true, `${health.index_chunks} chunks`);
  } catch {
    setConnection(false);
  }
}

async function submit(): Promise<void> {
  const prompt = promptInput.value;
  if (!state.canSubmit(prompt)) return;
  state.model = modelSelect.value;
  for (const name of toggleIds) {
    state.toggles[name] = (el(`toggle-${name}`) as HTMLInputElement).checked;
  }
  state.sceneXml = sceneInput.value;

  const request = state.buildRequest(prompt);
  promptInput.value = "";
  state.beginExchange(prompt);
  renderTranscript();
  syncControls();
  try {
    await streamChat(base, request, (event) => {
      state.applyEvent(event);
      renderTranscript();
    });
  } catch (exc) {
    state.abort(exc instanceof Error ? exc.message : String(exc));
    renderTranscript();
    setConnection(false);
  } finally {
    state.streaming = false;
    syncControls();
  }
}

async function reset(): Promise<void> {
  if (state.streaming) return; // the service would refuse anyway
  const acknowledged = await resetSession(base, state.sessionId).catch(() => false);
  if (acknowledged) {
    state.resetTranscript();
    renderTranscript();
  }
}

submitButton.addEventListener("click", () => void submit());
promptInput.addEventListener("keydown", (event) => {
  if (event.key === "Enter" && !event.shiftKey) {
    event.preventDefault();
    void submit();
  }
});
resetButton.addEventListener("click", () => void reset());
connectButton.addEventListener("click", () => void connect());

void connect();
