/** Epoch seconds to a readable UTC timestamp (presentation only). */
export function when(epochSeconds: number): string {
  return new Date(epochSeconds * 1000).toISOString().replace("T", " ").slice(0, 19) + " UTC";
}

/**
 * Clinical values are shown exactly as the API sent them; this only
 * turns them into text.
 */
export function verbatim(value: number | null): string {
  return value === null ? "n/a" : String(value);
}
