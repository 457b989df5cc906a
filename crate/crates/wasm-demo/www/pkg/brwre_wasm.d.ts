/* tslint:disable */
/* eslint-disable */

/**
 * Letter A with probability `p_a`, otherwise letter B. Each letter has a
 * deterministic number of children and Gaussian steps.
 */
export class TwoStateModel {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Normalized CDF of one tree at generation `n` against the standard normal.
     */
    clt(n: number, seed: number): string;
    constructor(p_a: number, children_a: number, mean_a: number, variance_a: number, children_b: number, mean_b: number, variance_b: number);
    /**
     * `lambda`, the free-energy limit and the critical temperatures on `[t_min, t_max]`.
     */
    rates(t_min: number, t_max: number, points: number): string;
    /**
     * Grows one tree to generation `n` and summarizes every generation.
     */
    simulate(n: number, seed: number): string;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_twostatemodel_free: (a: number, b: number) => void;
    readonly twostatemodel_clt: (a: number, b: number, c: number) => [number, number, number, number];
    readonly twostatemodel_new: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number];
    readonly twostatemodel_rates: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly twostatemodel_simulate: (a: number, b: number, c: number) => [number, number, number, number];
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
