//! Argument helpers shared by the command line tools.

use anyhow::{bail, Context, Result};

/// Parses `WxH`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s.split_once(['x', 'X']).with_context(|| format!("size {s:?} is not WxH"))?;
    let (w, h) = (w.trim().parse()?, h.trim().parse()?);
    if w == 0 || h == 0 {
        bail!("size {s:?} has a zero side");
    }
    Ok((w, h))
}

pub fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
}
