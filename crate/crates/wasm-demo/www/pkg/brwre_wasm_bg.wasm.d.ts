/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_twostatemodel_free: (a: number, b: number) => void;
export const twostatemodel_clt: (a: number, b: number, c: number) => [number, number, number, number];
export const twostatemodel_new: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number];
export const twostatemodel_rates: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const twostatemodel_simulate: (a: number, b: number, c: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
