//! Timing of the main building blocks on simulated data.

use std::hint::black_box;

use c2g_core::add_c2g::{fit_add_c2g, AddC2gConfig};
use c2g_core::density::{cde_tune, predictive_recursion, CdeGrid, PrConfig};
use c2g_core::kernel::{default_krr_grids, tune_krr};
use c2g_core::np_c2g::{fit_np_c2g, NpC2gConfig};
use c2g_core::selection::select_by_average;
use c2g_core::simgen::{gen_additive, true_posteriors};
use c2g_core::split_by_treatment;
use criterion::Criterion;

pub fn benchmarks(c: &mut Criterion) {
    selection(c);
    kernel_ridge(c);
    densities(c);
    estimators(c);
}

fn selection(c: &mut Criterion) {
    let (ds, truth) = gen_additive(20_000, 10, 1.0, 1).unwrap();
    let w = true_posteriors(&truth, &ds).unwrap();
    c.bench_function("select_by_average/10k", |b| b.iter(|| select_by_average(black_box(&w), 0.1)));
}

fn kernel_ridge(c: &mut Criterion) {
    let (ds, _) = gen_additive(600, 10, 1.0, 2).unwrap();
    let split = split_by_treatment(&ds).unwrap();
    let (x, y) = ds.subset_rows(&split.untreated);
    let (bw, ridge) = default_krr_grids(&x, ds.d());
    c.bench_function("krr_gcv_tune/300", |b| b.iter(|| tune_krr(black_box(&x), ds.d(), &y, &bw, &ridge).unwrap()));
}

fn densities(c: &mut Criterion) {
    let (ds, _) = gen_additive(1000, 10, 5.0, 3).unwrap();
    let split = split_by_treatment(&ds).unwrap();
    let (x, y) = ds.subset_rows(&split.treated);
    let grid = CdeGrid::default_for(&x, ds.d(), &y);
    c.bench_function("cde_tune/500", |b| b.iter(|| cde_tune(black_box(&x), ds.d(), &y, true, &grid).unwrap()));

    let res: Vec<f64> = y.iter().map(|v| v - 1.0).collect();
    c.bench_function("predictive_recursion/500", |b| b.iter(|| predictive_recursion(black_box(&res), 0.5, &PrConfig::default(), 0).unwrap()));
}

fn estimators(c: &mut Criterion) {
    let (ds, _) = gen_additive(400, 5, 5.0, 4).unwrap();
    let mut group = c.benchmark_group("estimators/400");
    group.sample_size(10);
    let np = NpC2gConfig { bootstrap: 20, ..Default::default() };
    group.bench_function("np_c2g", |b| b.iter(|| fit_np_c2g(black_box(&ds), &np, 0).unwrap()));
    let add = AddC2gConfig { rff_dim: 64, ..Default::default() };
    group.bench_function("add_c2g", |b| b.iter(|| fit_add_c2g(black_box(&ds), &add, 0).unwrap()));
    group.finish();
}
