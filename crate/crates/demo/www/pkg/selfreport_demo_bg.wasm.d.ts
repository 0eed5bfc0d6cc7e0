/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const attenuation: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const context_count: () => number;
export const prompt_preview: (a: number, b: number, c: number) => [number, number, number, number];
export const recovery: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
