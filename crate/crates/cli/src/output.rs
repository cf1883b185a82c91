//! CSV renderings of command results.
//!
//! Tables are long-format with one row per pair; singles use the label `0`
//! on the missing side, matching the sample CSV convention.

use itu_match::compstats::CompstatsResult;
use itu_match::estimation::{FitResult, ParametricModel};
use itu_match::search::SearchOutcome;
use itu_match::{Market, Matching};

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv output is utf-8")
}

fn push(w: &mut csv::Writer<Vec<u8>>, row: &[String]) {
    w.write_record(row).expect("in-memory csv");
}

fn matching_rows(w: &mut csv::Writer<Vec<u8>>, market: &Market, mm: &Matching) {
    for (x, xl) in market.men.iter().enumerate() {
        for (y, yl) in market.women.iter().enumerate() {
            push(w, &[xl.clone(), yl.clone(), mm.mu[(x, y)].to_string()]);
        }
    }
    for (x, xl) in market.men.iter().enumerate() {
        push(w, &[xl.clone(), "0".into(), mm.mu_x0[x].to_string()]);
    }
    for (y, yl) in market.women.iter().enumerate() {
        push(w, &["0".into(), yl.clone(), mm.mu_0y[y].to_string()]);
    }
}

/// `x_label,y_label,mu` for couples, then single men, then single women.
pub fn matching_csv(market: &Market, mm: &Matching) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    push(&mut w, &["x_label".into(), "y_label".into(), "mu".into()]);
    matching_rows(&mut w, market, mm);
    finish(w)
}

/// `parameter,estimate,std_error` with names `lambda[k]`, `u[label]`, `v[label]`.
pub fn fit_csv(model: &ParametricModel, fit: &FitResult) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    push(&mut w, &["parameter".into(), "estimate".into(), "std_error".into()]);
    let names = (0..model.num_params)
        .map(|k| format!("lambda[{k}]"))
        .chain(model.men.iter().map(|l| format!("u[{l}]")))
        .chain(model.women.iter().map(|l| format!("v[{l}]")));
    for (k, name) in names.enumerate() {
        push(
            &mut w,
            &[name, fit.theta[k].to_string(), fit.standard_errors[k].to_string()],
        );
    }
    finish(w)
}

/// `x_label,y_label,delta_mu,delta_u,delta_v` per pair.
pub fn compstats_csv(market: &Market, res: &CompstatsResult) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = ["x_label", "y_label", "delta_mu", "delta_u", "delta_v"];
    push(&mut w, &header.map(String::from));
    for (x, xl) in market.men.iter().enumerate() {
        for (y, yl) in market.women.iter().enumerate() {
            push(
                &mut w,
                &[
                    xl.clone(),
                    yl.clone(),
                    res.delta_mu[(x, y)].to_string(),
                    res.delta_u[(x, y)].to_string(),
                    res.delta_v[(x, y)].to_string(),
                ],
            );
        }
    }
    finish(w)
}

/// `x_label,y_label,mu,accepted` for couples, then singles (accepted empty).
pub fn search_csv(market: &Market, out: &SearchOutcome) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    push(
        &mut w,
        &["x_label".into(), "y_label".into(), "mu".into(), "accepted".into()],
    );
    for (x, xl) in market.men.iter().enumerate() {
        for (y, yl) in market.women.iter().enumerate() {
            push(
                &mut w,
                &[
                    xl.clone(),
                    yl.clone(),
                    out.matching.mu[(x, y)].to_string(),
                    out.accepted[x][y].to_string(),
                ],
            );
        }
    }
    for (x, xl) in market.men.iter().enumerate() {
        push(
            &mut w,
            &[xl.clone(), "0".into(), out.matching.mu_x0[x].to_string(), String::new()],
        );
    }
    for (y, yl) in market.women.iter().enumerate() {
        push(
            &mut w,
            &["0".into(), yl.clone(), out.matching.mu_0y[y].to_string(), String::new()],
        );
    }
    finish(w)
}
