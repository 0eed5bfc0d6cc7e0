/* tslint:disable */
/* eslint-disable */

/**
 * Draws one report per context with the given noise, shrinkage and
 * malformed rate, then scores reported against target weights.
 */
export function attenuation(seed: number, noise_sd: number, shrinkage: number, invalid_rate: number, draws: number): string;

/**
 * Number of bundled contexts, for the page's context picker.
 */
export function context_count(): number;

/**
 * Renders both prompts for one context and pair, with the answers a
 * subject holding the sampled target weights would give.
 */
export function prompt_preview(seed: number, context_index: number, pair_id: number): string;

/**
 * Simulates `decisions` choices per context from a subject with logit
 * sharpness `sharpness` (0 for coin flips, negative for deterministic),
 * fits each context and correlates learned slopes with the targets.
 */
export function recovery(seed: number, sharpness: number, decisions: number, n_contexts: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly attenuation: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly context_count: () => number;
    readonly prompt_preview: (a: number, b: number, c: number) => [number, number, number, number];
    readonly recovery: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
