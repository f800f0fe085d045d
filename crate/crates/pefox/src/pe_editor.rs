//! Structural perturbation of PE32 files.
//!
//! Three byte-level rewrites are implemented, selectable in combination via a
//! three-bit perturbation path applied in fixed order:
//!
//! * **Obfusmal** — XOR-encrypt the code section in place and append a
//!   decryptor stub section; the entry point moves into the stub.
//! * **Stealmal** — XOR-encrypt the whole file and embed it as a new section
//!   of a carrier executable; the output presents the carrier's imports.
//! * **Hollowmal** — embed the encrypted file in a benign host together with
//!   a loader DLL section; the entry point moves into the loader.
//!
//! All rewrites are append-only: existing bytes are never moved, headers are
//! patched in place, and every output re-parses cleanly. Stubs, carriers and
//! loaders are opaque registered payloads — nothing here is ever executed.

use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::pe_model::{
    parse_pe, round_up, serialize_pe, OptionalKind, PeError, PeImage, PeSection, SectionHeader,
    SCN_CNT_CODE, SCN_CNT_INITIALIZED_DATA, SCN_MEM_EXECUTE, SCN_MEM_READ,
};

/// Default XOR key for all encryption steps.
pub const DEFAULT_XOR_KEY: u8 = 0x15;
/// Hard cap on section count after an append.
pub const MAX_SECTIONS: usize = 96;

// ---- errors ----

/// Errors produced by the editing operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EditError {
    /// Only PE32 images can be edited.
    NotPe32,
    /// Appending would exceed [`MAX_SECTIONS`].
    TooManySections { count: usize },
    /// Not enough slack between the section table and the first section's
    /// raw data to hold another header row.
    InsufficientHeaderSpace { available: usize },
    /// Obfusmal found no executable section.
    NoCodeSection,
    /// The path requests a method whose registry list is empty.
    EmptyRegistry(Method),
    /// A registry manifest line could not be parsed.
    BadManifest { line: usize, reason: String },
    /// A manifest payload could not be read from disk.
    Io { path: String, reason: String },
    /// An underlying model operation failed.
    Pe(PeError),
}

impl fmt::Display for EditError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EditError::NotPe32 => write!(f, "image is not PE32"),
            EditError::TooManySections { count } => {
                write!(f, "appending would give {count} sections, limit is {MAX_SECTIONS}")
            }
            EditError::InsufficientHeaderSpace { available } => write!(
                f,
                "only {available} spare header bytes, need 40 for another section row"
            ),
            EditError::NoCodeSection => write!(f, "image has no executable section"),
            EditError::EmptyRegistry(m) => write!(f, "registry has no {m} payloads"),
            EditError::BadManifest { line, reason } => {
                write!(f, "bad registry manifest at line {line}: {reason}")
            }
            EditError::Io { path, reason } => write!(f, "cannot read '{path}': {reason}"),
            EditError::Pe(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EditError {}

impl From<PeError> for EditError {
    fn from(e: PeError) -> Self {
        EditError::Pe(e)
    }
}

// ---- perturbation path ----

/// One of the three rewrite methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Obfusmal,
    Stealmal,
    Hollowmal,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Obfusmal => "obfusmal",
            Method::Stealmal => "stealmal",
            Method::Hollowmal => "hollowmal",
        })
    }
}

/// A three-bit method selection plus the noise values that pick concrete
/// payload instances. Bit order is (Obfusmal, Stealmal, Hollowmal); that is
/// also the application order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationPath {
    pub bits: [bool; 3],
    /// Instance-selection values in `[0, 1)`, one per method.
    pub noise: [f64; 3],
}

impl PerturbationPath {
    pub fn new(bits: [bool; 3], noise: [f64; 3]) -> Self {
        PerturbationPath { bits, noise }
    }

    /// Parse a literal like `"110"`; instance noise defaults to zero.
    pub fn from_bit_string(s: &str) -> Option<Self> {
        let b: Vec<bool> = s
            .chars()
            .map(|c| match c {
                '0' => Some(false),
                '1' => Some(true),
                _ => None,
            })
            .collect::<Option<_>>()?;
        if b.len() != 3 {
            return None;
        }
        Some(PerturbationPath { bits: [b[0], b[1], b[2]], noise: [0.0; 3] })
    }

    pub fn is_identity(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// Map a noise value in `[0, 1)` onto an instance index: `floor(u * count)`,
/// clamped into range so boundary values stay legal.
pub fn noise_to_instance(u: f64, count: usize) -> usize {
    if count == 0 {
        return 0;
    }
    let i = (u * count as f64).floor();
    if i.is_nan() || i < 0.0 {
        0
    } else {
        (i as usize).min(count - 1)
    }
}

// ---- registry ----

/// Ordered payload lists backing the three methods. Every registered payload
/// must itself parse as PE32 — the editor never emits a file whose embedded
/// carriers would not survive its own parser.
#[derive(Debug, Clone, Default)]
pub struct StubRegistry {
    obfusmal_stubs: Vec<Vec<u8>>,
    stealmal_hosts: Vec<Vec<u8>>,
    hollowmal_hosts: Vec<Vec<u8>>,
    hollowmal_dlls: Vec<Vec<u8>>,
}

impl StubRegistry {
    pub fn new() -> Self {
        StubRegistry::default()
    }

    fn validate(bytes: &[u8]) -> Result<(), EditError> {
        let image = parse_pe(bytes)?;
        if image.optional.kind != OptionalKind::Pe32 {
            return Err(EditError::NotPe32);
        }
        Ok(())
    }

    pub fn register_obfusmal_stub(&mut self, bytes: Vec<u8>) -> Result<(), EditError> {
        Self::validate(&bytes)?;
        self.obfusmal_stubs.push(bytes);
        Ok(())
    }

    pub fn register_stealmal_host(&mut self, bytes: Vec<u8>) -> Result<(), EditError> {
        Self::validate(&bytes)?;
        self.stealmal_hosts.push(bytes);
        Ok(())
    }

    pub fn register_hollowmal_host(&mut self, bytes: Vec<u8>) -> Result<(), EditError> {
        Self::validate(&bytes)?;
        self.hollowmal_hosts.push(bytes);
        Ok(())
    }

    pub fn register_hollowmal_dll(&mut self, bytes: Vec<u8>) -> Result<(), EditError> {
        Self::validate(&bytes)?;
        self.hollowmal_dlls.push(bytes);
        Ok(())
    }

    pub fn obfusmal_stubs(&self) -> &[Vec<u8>] {
        &self.obfusmal_stubs
    }

    pub fn stealmal_hosts(&self) -> &[Vec<u8>] {
        &self.stealmal_hosts
    }

    pub fn hollowmal_hosts(&self) -> &[Vec<u8>] {
        &self.hollowmal_hosts
    }

    pub fn hollowmal_dlls(&self) -> &[Vec<u8>] {
        &self.hollowmal_dlls
    }

    /// Number of selectable instances per method. Hollowmal instances are
    /// (host, dll) pairs, so its count is the product of both lists.
    pub fn instance_count(&self, method: Method) -> usize {
        match method {
            Method::Obfusmal => self.obfusmal_stubs.len(),
            Method::Stealmal => self.stealmal_hosts.len(),
            Method::Hollowmal => self.hollowmal_hosts.len() * self.hollowmal_dlls.len(),
        }
    }

    /// Parse a registry manifest: one `method<TAB>path` line per payload,
    /// `#` comments and blank lines allowed. Methods are `obfusmal`,
    /// `stealmal`, `hollowmal-host`, `hollowmal-dll`. Relative paths resolve
    /// against `base_dir`.
    pub fn from_manifest(text: &str, base_dir: &Path) -> Result<Self, EditError> {
        let mut reg = StubRegistry::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (method, path) = line.split_once('\t').ok_or_else(|| EditError::BadManifest {
                line: lineno,
                reason: "expected 'method<TAB>path'".into(),
            })?;
            let full = base_dir.join(path.trim());
            let bytes = std::fs::read(&full).map_err(|e| EditError::Io {
                path: full.display().to_string(),
                reason: e.to_string(),
            })?;
            match method.trim() {
                "obfusmal" => reg.register_obfusmal_stub(bytes)?,
                "stealmal" => reg.register_stealmal_host(bytes)?,
                "hollowmal-host" => reg.register_hollowmal_host(bytes)?,
                "hollowmal-dll" => reg.register_hollowmal_dll(bytes)?,
                other => {
                    return Err(EditError::BadManifest {
                        line: lineno,
                        reason: format!("unknown method '{other}'"),
                    })
                }
            }
        }
        Ok(reg)
    }

    /// Read and parse a manifest file; payload paths resolve against the
    /// manifest's directory.
    pub fn from_manifest_file(path: &Path) -> Result<Self, EditError> {
        let text = std::fs::read_to_string(path).map_err(|e| EditError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(&text, base)
    }
}

// ---- primitive transforms ----

/// XOR every byte with `key`. Applying it twice restores the input.
pub fn xor_transform(data: &[u8], key: u8) -> Vec<u8> {
    data.iter().map(|b| b ^ key).collect()
}

/// Append `payload` as a new section named `name`, honoring alignment rules:
/// raw data lands at the old file length rounded up to `file_alignment`, the
/// virtual address at the old `size_of_image` rounded up to
/// `section_alignment`, and `virtual_size` is the unpadded payload length.
/// No existing byte moves; the new header row consumes 40 bytes of header
/// slack and a former overlay becomes padding before the new section.
pub fn add_section(
    image: &PeImage,
    payload: &[u8],
    name: [u8; 8],
    characteristics: u32,
) -> Result<PeImage, EditError> {
    if image.optional.kind != OptionalKind::Pe32 {
        return Err(EditError::NotPe32);
    }
    if image.sections.len() + 1 > MAX_SECTIONS {
        return Err(EditError::TooManySections { count: image.sections.len() + 1 });
    }
    if image.header_fill.len() < 40 {
        return Err(EditError::InsufficientHeaderSpace { available: image.header_fill.len() });
    }

    let file_alignment = image.optional.file_alignment;
    let section_alignment = image.optional.section_alignment;
    let old_len = image.file_len() as u64;
    if old_len + payload.len() as u64 + file_alignment as u64 > u32::MAX as u64 {
        return Err(EditError::Pe(PeError::SpecTooLarge {
            reason: "appended file would exceed 4 GiB".into(),
        }));
    }

    let pointer_to_raw_data = round_up(old_len as u32, file_alignment);
    let virtual_size = payload.len() as u32;
    let virtual_address = round_up(image.optional.size_of_image, section_alignment);
    let size_of_raw_data = round_up(virtual_size.max(1), file_alignment);

    let mut out = image.clone();
    // The table grows by one row, eating the front of the header fill.
    out.header_fill.drain(..40);
    // A former overlay plus alignment zeros becomes padding before the new
    // raw data: the gap spans from where the overlay began to the pointer.
    let mut gap_before = std::mem::take(&mut out.trailing);
    let gap_len = pointer_to_raw_data as usize - (old_len as usize - gap_before.len());
    gap_before.resize(gap_len, 0);

    let mut data = payload.to_vec();
    data.resize(size_of_raw_data as usize, 0);

    out.sections.push(PeSection {
        header: SectionHeader {
            name,
            virtual_size,
            virtual_address,
            size_of_raw_data,
            pointer_to_raw_data,
            pointer_to_relocations: 0,
            pointer_to_linenumbers: 0,
            number_of_relocations: 0,
            number_of_linenumbers: 0,
            characteristics,
        },
        data,
        gap_before,
    });
    out.file_header.number_of_sections = out.sections.len() as u16;
    out.optional.size_of_image =
        round_up(virtual_address + virtual_size.max(1), section_alignment);
    Ok(out)
}

// ---- the three methods ----

/// 16-byte parameter block: four little-endian u32 values.
fn param_block(a: u32, b: u32, c: u32, d: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(16);
    out.extend_from_slice(&a.to_le_bytes());
    out.extend_from_slice(&b.to_le_bytes());
    out.extend_from_slice(&c.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out
}

/// Obfusmal: XOR-encrypt the first executable section and append `stub` as a
/// new section prefixed by a parameter block of (code file offset, code
/// size, original entry point, key). The entry point becomes the stub's own
/// entry point plus the pre-edit `size_of_image` — exactly where the stub
/// section lands. Imports are untouched, so the feature set is preserved.
pub fn obfusmal(image: &PeImage, stub: &[u8], key: u8) -> Result<PeImage, EditError> {
    if image.optional.kind != OptionalKind::Pe32 {
        return Err(EditError::NotPe32);
    }
    let stub_image = parse_pe(stub)?;
    let code_idx = image
        .sections
        .iter()
        .position(|s| s.header.is_executable())
        .ok_or(EditError::NoCodeSection)?;

    let mut work = image.clone();
    {
        let code = &mut work.sections[code_idx];
        code.data = xor_transform(&code.data, key);
    }
    let code_header = &work.sections[code_idx].header;
    let block = param_block(
        code_header.pointer_to_raw_data,
        code_header.size_of_raw_data,
        image.optional.entry_point_rva,
        key as u32,
    );
    let old_size_of_image = work.optional.size_of_image;
    let mut payload = block;
    payload.extend_from_slice(stub);
    let mut out = add_section(
        &work,
        &payload,
        *b".shell\0\0",
        SCN_CNT_CODE | SCN_MEM_EXECUTE | SCN_MEM_READ,
    )?;
    out.optional.entry_point_rva = stub_image.optional.entry_point_rva + old_size_of_image;
    Ok(out)
}

/// Stealmal: XOR-encrypt the whole serialized file and append it as a data
/// section of `host`. The result is the host plus one section; its entry
/// point and imports are the host's own.
pub fn stealmal(image: &PeImage, host: &[u8], key: u8) -> Result<PeImage, EditError> {
    let host_image = parse_pe(host)?;
    let payload = xor_transform(&serialize_pe(image)?, key);
    add_section(
        &host_image,
        &payload,
        *b".spay\0\0\0",
        SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ,
    )
}

/// Hollowmal: append two sections to a benign host — the XOR-encrypted file,
/// then `dll` prefixed by a parameter block of (key, payload size, payload
/// section index, 0). The entry point moves to the loader DLL's entry point
/// at its new base.
pub fn hollowmal(
    image: &PeImage,
    host: &[u8],
    dll: &[u8],
    key: u8,
) -> Result<PeImage, EditError> {
    let host_image = parse_pe(host)?;
    let dll_image = parse_pe(dll)?;
    let encrypted = xor_transform(&serialize_pe(image)?, key);
    let with_payload = add_section(
        &host_image,
        &encrypted,
        *b".hpay\0\0\0",
        SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ,
    )?;
    let payload_index = (with_payload.sections.len() - 1) as u32;
    let dll_va = with_payload.optional.size_of_image;
    let mut payload = param_block(key as u32, encrypted.len() as u32, payload_index, 0);
    payload.extend_from_slice(dll);
    let mut out = add_section(
        &with_payload,
        &payload,
        *b".hdll\0\0\0",
        SCN_CNT_CODE | SCN_MEM_EXECUTE | SCN_MEM_READ,
    )?;
    out.optional.entry_point_rva = dll_image.optional.entry_point_rva + dll_va;
    Ok(out)
}

// ---- path application ----

/// Record of one path application, serializable as a key-value document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditReport {
    /// SHA-256 of the input file bytes, hex.
    pub input_hash: String,
    /// SHA-256 of the output file bytes, hex.
    pub output_hash: String,
    /// Methods applied in order with their instance indices.
    pub applied: Vec<(Method, usize)>,
    /// Total sections contributed by the applied methods (1 + 1 + 2).
    pub sections_added: usize,
    pub oep_before: u32,
    pub oep_after: u32,
}

impl EditReport {
    /// Line-oriented key-value rendering:
    ///
    /// ```text
    /// input_hash <hex>
    /// output_hash <hex>
    /// applied obfusmal:0,hollowmal:2
    /// sections_added 3
    /// oep_before 0x00001000
    /// oep_after 0x00005000
    /// ```
    pub fn to_document(&self) -> String {
        let applied = if self.applied.is_empty() {
            "none".to_string()
        } else {
            self.applied
                .iter()
                .map(|(m, i)| format!("{m}:{i}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "input_hash {}\noutput_hash {}\napplied {}\nsections_added {}\noep_before {:#010x}\noep_after {:#010x}\n",
            self.input_hash, self.output_hash, applied, self.sections_added,
            self.oep_before, self.oep_after
        )
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Apply `path` to `image` with the default XOR key.
pub fn apply_path(
    image: &PeImage,
    path: &PerturbationPath,
    registry: &StubRegistry,
) -> Result<(PeImage, EditReport), EditError> {
    apply_path_with_key(image, path, registry, DEFAULT_XOR_KEY)
}

/// Apply `path` to `image`: set bits run their methods in (Obfusmal,
/// Stealmal, Hollowmal) order, each consuming the previous output. Noise
/// values pick payload instances via [`noise_to_instance`]. The identity
/// path returns byte-identical output.
pub fn apply_path_with_key(
    image: &PeImage,
    path: &PerturbationPath,
    registry: &StubRegistry,
    key: u8,
) -> Result<(PeImage, EditReport), EditError> {
    let input_bytes = serialize_pe(image)?;
    let oep_before = image.optional.entry_point_rva;

    let mut current = image.clone();
    let mut applied = Vec::new();
    let mut sections_added = 0usize;

    if path.bits[0] {
        let count = registry.instance_count(Method::Obfusmal);
        if count == 0 {
            return Err(EditError::EmptyRegistry(Method::Obfusmal));
        }
        let i = noise_to_instance(path.noise[0], count);
        current = obfusmal(&current, &registry.obfusmal_stubs[i], key)?;
        applied.push((Method::Obfusmal, i));
        sections_added += 1;
    }
    if path.bits[1] {
        let count = registry.instance_count(Method::Stealmal);
        if count == 0 {
            return Err(EditError::EmptyRegistry(Method::Stealmal));
        }
        let i = noise_to_instance(path.noise[1], count);
        current = stealmal(&current, &registry.stealmal_hosts[i], key)?;
        applied.push((Method::Stealmal, i));
        sections_added += 1;
    }
    if path.bits[2] {
        let count = registry.instance_count(Method::Hollowmal);
        if count == 0 {
            return Err(EditError::EmptyRegistry(Method::Hollowmal));
        }
        let i = noise_to_instance(path.noise[2], count);
        let dll_count = registry.hollowmal_dlls.len();
        let host = &registry.hollowmal_hosts[i / dll_count];
        let dll = &registry.hollowmal_dlls[i % dll_count];
        current = hollowmal(&current, host, dll, key)?;
        applied.push((Method::Hollowmal, i));
        sections_added += 2;
    }

    let output_bytes = serialize_pe(&current)?;
    let report = EditReport {
        input_hash: sha256_hex(&input_bytes),
        output_hash: sha256_hex(&output_bytes),
        applied,
        sections_added,
        oep_before,
        oep_after: current.optional.entry_point_rva,
    };
    Ok((current, report))
}

// ---- tests ----
