/* tslint:disable */
/* eslint-disable */

/**
 * One function tree edited from the page.
 */
export class TreeDemo {
    free(): void;
    [Symbol.dispose](): void;
    clear(): void;
    /**
     * Removes `vm`; returns the rotations applied.
     */
    delete(vm: number): string;
    /**
     * Adds the next VM id; returns `{vm, parent}`.
     */
    insert(): string;
    constructor();
    /**
     * `{root, height, nodes: [{vm, parent, left, right, height}]}`.
     */
    snapshot(): string;
}

/**
 * Bytes fetched before start at each block size, for a prefix of
 * `startup_fraction` plus `scattered` 600 kB reads spread over the image:
 * `[{block_size, fetched, total, reduction}]`.
 */
export function amplification(image_mb: number, startup_fraction: number, scattered: number): string;

/**
 * Mean provisioning latency of a one-function burst at each concurrency,
 * per policy: `[{policy, concurrency, mean_s, makespan_s, registry_bytes}]`.
 */
export function concurrency_sweep(image_mb: number, registry_gbps: number, policies: string, concurrencies: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_treedemo_free: (a: number, b: number) => void;
    readonly amplification: (a: number, b: number, c: number) => [number, number, number, number];
    readonly concurrency_sweep: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly treedemo_clear: (a: number) => void;
    readonly treedemo_delete: (a: number, b: number) => [number, number, number, number];
    readonly treedemo_insert: (a: number) => [number, number, number, number];
    readonly treedemo_new: () => number;
    readonly treedemo_snapshot: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
