/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_treedemo_free: (a: number, b: number) => void;
export const amplification: (a: number, b: number, c: number) => [number, number, number, number];
export const concurrency_sweep: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const treedemo_clear: (a: number) => void;
export const treedemo_delete: (a: number, b: number) => [number, number, number, number];
export const treedemo_insert: (a: number) => [number, number, number, number];
export const treedemo_new: () => number;
export const treedemo_snapshot: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
