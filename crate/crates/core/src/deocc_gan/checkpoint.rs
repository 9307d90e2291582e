//! Checkpoint container: a text header (magic, version, architecture,
//! counters, optimizer scalars, rng state) followed by a little-endian
//! binary payload of every parameter, buffer and optimizer moment tensor.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ArchDescriptor, NetworkParams};
use crate::error::{Error, Result};
use crate::nn::{AdamState, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "deocc-checkpoint";
const PAYLOAD_MARK: &str = "payload";

/// Complete training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: NetworkParams,
    pub opt_g: AdamState,
    pub opt_dg: AdamState,
    pub opt_dl: AdamState,
    pub epochs_done: usize,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    /// Fresh state for inference-only use of `net`.
    pub fn for_network(net: NetworkParams) -> Self {
        let adam = |p| AdamState::new(p, 0.5, 0.999, 1e-8);
        Self {
            opt_g: adam(&net.generator.params),
            opt_dg: adam(&net.d_global.params),
            opt_dl: adam(&net.d_local.params),
            net,
            epochs_done: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

fn write_store(out: &mut Vec<u8>, store: &ParamStore) {
    out.extend((store.entries().len() as u32).to_le_bytes());
    for e in store.entries() {
        out.extend((e.name.len() as u32).to_le_bytes());
        out.extend(e.name.as_bytes());
        out.extend((e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in &e.data {
            out.extend(v.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::InvalidInput("checkpoint payload is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads a store and checks it against the layout of `expected`.
fn read_store(cur: &mut Cursor<'_>, expected: &ParamStore) -> Result<ParamStore> {
    let count = cur.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::InvalidInput("checkpoint tensor name is not UTF-8".into()))?;
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        if len > cur.bytes.len() / 8 {
            return Err(Error::InvalidInput("checkpoint payload is truncated".into()));
        }
        let data = (0..len).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        store.add(name, shape, data);
    }
    expected.check_layout(&store)?;
    Ok(store)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut header = format!("{MAGIC}\nversion {CHECKPOINT_VERSION}\n");
    header.push_str(&ck.net.arch().to_text());
    header.push_str(&format!("epochs_done {}\n", ck.epochs_done));
    for (name, opt) in [("adam_g", &ck.opt_g), ("adam_dg", &ck.opt_dg), ("adam_dl", &ck.opt_dl)] {
        header.push_str(&format!("{name} {} {:?} {:?} {:?}\n", opt.t, opt.beta1, opt.beta2, opt.eps));
    }
    header.push_str(&format!(
        "rng {} {} {}\n",
        hex(&ck.rng.get_seed()),
        ck.rng.get_stream(),
        ck.rng.get_word_pos()
    ));
    let mut payload = Vec::new();
    let net = &ck.net;
    for store in [
        &net.generator.params,
        &net.generator.buffers,
        &net.d_global.params,
        &net.d_global.buffers,
        &net.d_local.params,
        &net.d_local.buffers,
        &ck.opt_g.m,
        &ck.opt_g.v,
        &ck.opt_dg.m,
        &ck.opt_dg.v,
        &ck.opt_dl.m,
        &ck.opt_dl.v,
    ] {
        write_store(&mut payload, store);
    }
    header.push_str(&format!("{PAYLOAD_MARK} {}\n", payload.len()));
    let mut bytes = header.into_bytes();
    bytes.extend(payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    // Header lines are ASCII; find the payload marker line.
    let mut pos = 0;
    let mut lines = Vec::new();
    let payload_len = loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(lines.len() + 1, "checkpoint header is truncated"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| Error::parse(lines.len() + 1, "checkpoint header is not UTF-8"))?
            .to_string();
        pos += nl + 1;
        if let Some(rest) = line.strip_prefix(&format!("{PAYLOAD_MARK} ")) {
            break rest
                .parse::<usize>()
                .map_err(|_| Error::parse(lines.len() + 1, "bad payload length"))?;
        }
        lines.push(line);
    };
    if lines.first().map(String::as_str) != Some(MAGIC) {
        return Err(Error::parse(1, "not a checkpoint file"));
    }
    let field = |key: &str| -> Result<(usize, &str)> {
        lines
            .iter()
            .enumerate()
            .find_map(|(i, l)| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')).map(|r| (i + 1, r)))
            .ok_or_else(|| Error::parse(0, format!("checkpoint header lacks `{key}`")))
    };
    let (vl, v) = field("version")?;
    let version: u32 = v.parse().map_err(|_| Error::parse(vl, "bad version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            kind: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let arch_text: String = ["resolution", "gen_channels", "disc_channels"]
        .iter()
        .map(|k| field(k).map(|(_, v)| format!("{k} {v}\n")))
        .collect::<Result<_>>()?;
    let arch = ArchDescriptor::from_text(&arch_text)?;
    let (el, e) = field("epochs_done")?;
    let epochs_done = e.parse().map_err(|_| Error::parse(el, "bad epochs_done"))?;
    let adam_scalars = |key: &str| -> Result<(u64, f64, f64, f64)> {
        let (l, v) = field(key)?;
        let parts: Vec<&str> = v.split_whitespace().collect();
        let err = || Error::parse(l, format!("bad `{key}` line"));
        if parts.len() != 4 {
            return Err(err());
        }
        Ok((
            parts[0].parse().map_err(|_| err())?,
            parts[1].parse().map_err(|_| err())?,
            parts[2].parse().map_err(|_| err())?,
            parts[3].parse().map_err(|_| err())?,
        ))
    };
    let (rl, r) = field("rng")?;
    let rparts: Vec<&str> = r.split_whitespace().collect();
    let rerr = || Error::parse(rl, "bad rng state");
    if rparts.len() != 3 {
        return Err(rerr());
    }
    let seed: [u8; 32] = unhex(rparts[0]).and_then(|v| v.try_into().ok()).ok_or_else(rerr)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(rparts[1].parse().map_err(|_| rerr())?);
    rng.set_word_pos(rparts[2].parse().map_err(|_| rerr())?);

    let payload = &bytes[pos..];
    if payload.len() != payload_len {
        return Err(Error::InvalidInput(format!(
            "checkpoint payload has {} bytes, header says {payload_len}",
            payload.len()
        )));
    }
    let mut net = NetworkParams::new(&arch, 0)?;
    let mut cur = Cursor { bytes: payload, pos: 0 };
    net.generator.params = read_store(&mut cur, &net.generator.params)?;
    net.generator.buffers = read_store(&mut cur, &net.generator.buffers)?;
    net.d_global.params = read_store(&mut cur, &net.d_global.params)?;
    net.d_global.buffers = read_store(&mut cur, &net.d_global.buffers)?;
    net.d_local.params = read_store(&mut cur, &net.d_local.params)?;
    net.d_local.buffers = read_store(&mut cur, &net.d_local.buffers)?;
    let mut opt = |key: &str, like: &ParamStore| -> Result<AdamState> {
        let (t, beta1, beta2, eps) = adam_scalars(key)?;
        let m = read_store(&mut cur, like)?;
        let v = read_store(&mut cur, like)?;
        Ok(AdamState { m, v, t, beta1, beta2, eps })
    };
    let opt_g = opt("adam_g", &net.generator.params)?;
    let opt_dg = opt("adam_dg", &net.d_global.params)?;
    let opt_dl = opt("adam_dl", &net.d_local.params)?;
    if !net.all_finite() {
        return Err(Error::NonFinite("checkpoint holds non-finite parameters".into()));
    }
    Ok(Checkpoint {
        net,
        opt_g,
        opt_dg,
        opt_dl,
        epochs_done,
        rng,
    })
}
