/**
 * Incremental NDJSON parsing. Feed arbitrary chunk fragments; complete lines
 * come out as parsed objects in arrival order.
 */
export function createNdjsonParser(
  onMessage: (message: unknown) => void,
): { push: (chunk: string) => void; flush: () => void } {
  let buffer = "";

  const emit = (line: string) => {
    const trimmed = line.trim();
    if (!trimmed) return;
    onMessage(JSON.parse(trimmed));
  };

  return {
    push(chunk: string) {
      buffer += chunk;
      let nl: number;
      while ((nl = buffer.indexOf("\n")) !== -1) {
        const line = buffer.slice(0, nl);
        buffer = buffer.slice(nl + 1);
        emit(line);
      }
    },
    flush() {
      // A terminal line without a trailing newline still counts.
      const rest = buffer;
      buffer = "";
      emit(rest);
    },
  };
}
