//! `--qsr` values: a preset name with optional comma-separated parameters,
//! or a path to a JSON supply-rate description.

use std::path::Path;

use dissipnet_core::{Error, QsrFamily, QsrPreset, Result};

fn params(rest: Option<&str>, want: usize, name: &str) -> Result<Vec<f64>> {
    let vals: Vec<f64> = match rest {
        None => Vec::new(),
        Some(s) => s
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::contract(format!("bad number `{v}` in --qsr {name}")))
            })
            .collect::<Result<_>>()?,
    };
    if vals.len() != want {
        return Err(Error::contract(format!(
            "--qsr {name} takes {want} parameter(s), got {}",
            vals.len()
        )));
    }
    Ok(vals)
}

/// Accepted forms:
///
/// ```text
/// passivity
/// strict_passivity             (eps, delta searched)
/// strict_passivity:EPS,DELTA
/// l2_gain:GAMMA
/// conicity:C,R
/// sector:A,B
/// path/to/qsr.json             (a serialized QsrFamily)
/// ```
pub fn parse_qsr(arg: &str) -> Result<QsrFamily> {
    if arg.ends_with(".json") || Path::new(arg).is_file() {
        let text = std::fs::read_to_string(arg)?;
        return Ok(serde_json::from_str(&text)?);
    }
    let (name, rest) = match arg.split_once(':') {
        Some((n, r)) => (n, Some(r)),
        None => (arg, None),
    };
    let preset = match name {
        "passivity" => {
            params(rest, 0, name)?;
            QsrPreset::Passivity
        }
        "strict_passivity" if rest.is_none() => return Ok(QsrFamily::StrictPassivityFamily),
        "strict_passivity" => {
            let v = params(rest, 2, name)?;
            QsrPreset::StrictPassivity { eps: v[0], delta: v[1] }
        }
        "l2_gain" => QsrPreset::L2Gain {
            gamma: params(rest, 1, name)?[0],
        },
        "conicity" => {
            let v = params(rest, 2, name)?;
            QsrPreset::Conicity { c: v[0], r: v[1] }
        }
        "sector" => {
            let v = params(rest, 2, name)?;
            QsrPreset::Sector { a: v[0], b: v[1] }
        }
        other => return Err(Error::contract(format!("unknown supply rate `{other}`"))),
    };
    Ok(QsrFamily::Preset { preset })
}
