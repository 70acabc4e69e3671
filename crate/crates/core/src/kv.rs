//! `key=value` text files: one pair per line, `#` starts a comment.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.split('#').next().unwrap_or("").trim();
        if !body.is_empty() {
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
                offset,
                msg: format!("expected key=value, found `{body}`"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    offset,
                    msg: "empty key".into(),
                });
            }
            if out.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Parse {
                    offset,
                    msg: format!("duplicate key `{k}`"),
                });
            }
        }
        offset += line.len();
    }
    Ok(out)
}
