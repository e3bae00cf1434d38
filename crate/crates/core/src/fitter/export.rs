//! Per-sample parameter tables: `id, beta_*, psi_*, jaw_0..2, valence,
//! arousal, expression_class`.

use std::io::{Read, Write};

use super::dataset::SyntheticSample;
use super::encoder::ExpressionEncoder;
use crate::error::{Error, Result};
use crate::face_model::FaceModel;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRow {
    pub id: String,
    pub beta: Vec<f64>,
    pub psi: Vec<f64>,
    pub jaw: [f64; 3],
    pub valence: f64,
    pub arousal: f64,
    pub expression_class: usize,
}

/// One row per sample; `psi` comes from the encoder when given, otherwise
/// from the sample's ground-truth parameters.
pub fn param_rows(model: &FaceModel, samples: &[SyntheticSample], encoder: Option<&ExpressionEncoder>) -> Result<Vec<ParamRow>> {
    let jaw = model.jaw_offset();
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let psi = match encoder {
                Some(e) => e.predict(&s.image)?,
                None => s.params.psi.clone(),
            };
            Ok(ParamRow {
                id: format!("sample_{i:05}"),
                beta: s.params.beta.clone(),
                psi,
                jaw: [s.params.theta[jaw], s.params.theta[jaw + 1], s.params.theta[jaw + 2]],
                valence: s.label.valence,
                arousal: s.label.arousal,
                expression_class: s.label.class,
            })
        })
        .collect()
}

fn header(n_beta: usize, n_psi: usize) -> Vec<String> {
    let mut h = vec!["id".to_string()];
    h.extend((0..n_beta).map(|i| format!("beta_{i}")));
    h.extend((0..n_psi).map(|i| format!("psi_{i}")));
    h.extend((0..3).map(|i| format!("jaw_{i}")));
    h.extend(["valence", "arousal", "expression_class"].map(String::from));
    h
}

pub fn write_param_rows<W: Write>(rows: &[ParamRow], n_beta: usize, n_psi: usize, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header(n_beta, n_psi))?;
    for r in rows {
        if r.beta.len() != n_beta || r.psi.len() != n_psi {
            return Err(Error::Param(format!("row {} does not match the {n_beta}/{n_psi} header", r.id)));
        }
        let mut rec = vec![r.id.clone()];
        // `{}` prints the shortest representation that parses back exactly
        rec.extend(r.beta.iter().chain(&r.psi).chain(&r.jaw).map(|v| format!("{v}")));
        rec.extend([format!("{}", r.valence), format!("{}", r.arousal), r.expression_class.to_string()]);
        out.write_record(rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn export_params_csv<W: Write>(
    model: &FaceModel,
    samples: &[SyntheticSample],
    encoder: Option<&ExpressionEncoder>,
    w: W,
) -> Result<()> {
    write_param_rows(&param_rows(model, samples, encoder)?, model.n_beta, model.n_psi, w)
}

pub fn read_params_csv<R: Read>(r: R) -> Result<Vec<ParamRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let head = rdr.headers()?.clone();
    let count = |prefix: &str| head.iter().filter(|h| h.starts_with(prefix)).count();
    let (n_beta, n_psi) = (count("beta_"), count("psi_"));
    let expected = header(n_beta, n_psi);
    if head.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Format("unexpected parameter table header".into()));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number {s:?}"))) };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let vals: Vec<f64> = (1..rec.len() - 1).map(|i| num(&rec[i])).collect::<Result<_>>()?;
        let class = rec[rec.len() - 1].parse().map_err(|_| Error::Format(format!("bad class {:?}", &rec[rec.len() - 1])))?;
        let jaw = &vals[n_beta + n_psi..n_beta + n_psi + 3];
        rows.push(ParamRow {
            id: rec[0].to_string(),
            beta: vals[..n_beta].to_vec(),
            psi: vals[n_beta..n_beta + n_psi].to_vec(),
            jaw: [jaw[0], jaw[1], jaw[2]],
            valence: vals[n_beta + n_psi + 3],
            arousal: vals[n_beta + n_psi + 4],
            expression_class: class,
        });
    }
    Ok(rows)
}
