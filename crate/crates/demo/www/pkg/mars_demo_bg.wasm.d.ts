/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_panels_free: (a: number, b: number) => void;
export const attention_heatmaps: (a: bigint, b: bigint, c: bigint, d: number, e: number, f: number, g: number) => [number, number, number];
export const equivariance: (a: bigint, b: bigint, c: number, d: number) => [number, number, number];
export const panels_count: (a: number) => number;
export const panels_height: (a: number, b: number) => number;
export const panels_label: (a: number, b: number) => [number, number];
export const panels_metrics: (a: number) => [number, number];
export const panels_note: (a: number) => [number, number];
export const panels_rgba: (a: number, b: number) => [number, number];
export const panels_width: (a: number, b: number) => number;
export const views: (a: bigint, b: bigint, c: number, d: number, e: number, f: number, g: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
