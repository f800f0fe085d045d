//! In-memory model of a Portable Executable file.
//!
//! The model is deliberately file-oriented rather than loader-oriented: a
//! [`PeImage`] captures every byte of the input (headers, section raw data,
//! padding gaps, trailing overlay) so that `serialize_pe(parse_pe(b)) == b`
//! holds for every accepted input. Editing operations elsewhere in the crate
//! rely on that fidelity: they append sections and patch named header fields
//! but never move existing bytes.
//!
//! PE32 files are fully supported; PE32+ files parse and round-trip but the
//! editor rejects them. Parsing is strict — malformed inputs are rejected
//! with the offending file offset rather than repaired.

use std::fmt;

// ---- constants ----

/// "MZ" little-endian.
pub const DOS_MAGIC: u16 = 0x5A4D;
/// "PE\0\0" little-endian.
pub const PE_SIGNATURE: u32 = 0x0000_4550;
/// Optional-header magic for PE32.
pub const PE32_MAGIC: u16 = 0x010B;
/// Optional-header magic for PE32+.
pub const PE32PLUS_MAGIC: u16 = 0x020B;

const DOS_HEADER_LEN: usize = 64;
const E_LFANEW_OFFSET: usize = 0x3C;
const COFF_HEADER_LEN: usize = 20;
const SECTION_HEADER_LEN: usize = 40;
const DATA_DIRECTORY_COUNT: usize = 16;
const OPT32_FIXED_LEN: usize = 96;
const OPT64_FIXED_LEN: usize = 112;

/// Index of the import directory in the data-directory table.
pub const IMPORT_DIRECTORY_INDEX: usize = 1;
/// Index of the IAT directory in the data-directory table.
pub const IAT_DIRECTORY_INDEX: usize = 12;

/// Section is executable (IMAGE_SCN_MEM_EXECUTE).
pub const SCN_MEM_EXECUTE: u32 = 0x2000_0000;
/// Section contains code (IMAGE_SCN_CNT_CODE).
pub const SCN_CNT_CODE: u32 = 0x0000_0020;
/// Section contains initialized data.
pub const SCN_CNT_INITIALIZED_DATA: u32 = 0x0000_0040;
/// Section is readable.
pub const SCN_MEM_READ: u32 = 0x4000_0000;
/// Section is writable.
pub const SCN_MEM_WRITE: u32 = 0x8000_0000;

// ---- errors ----

/// Errors produced while parsing, serializing or synthesizing PE files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PeError {
    /// A magic value did not match at the given file offset.
    BadMagic { offset: usize, found: u32, expected: u32 },
    /// The file ended before `needed` bytes could be read at `offset`.
    Truncated { offset: usize, needed: usize },
    /// A header field at `offset` is structurally invalid.
    MalformedHeader { offset: usize, reason: String },
    /// An in-memory image violates a structural invariant and cannot be
    /// serialized.
    InvariantViolation { reason: String },
    /// A fixture spec requests content that exceeds 32-bit file limits.
    SpecTooLarge { reason: String },
    /// A fixture spec document could not be parsed.
    BadSpec { line: usize, reason: String },
}

impl fmt::Display for PeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PeError::BadMagic { offset, found, expected } => write!(
                f,
                "bad magic at offset {offset:#x}: found {found:#x}, expected {expected:#x}"
            ),
            PeError::Truncated { offset, needed } => write!(
                f,
                "file truncated: need {needed} bytes at offset {offset:#x}"
            ),
            PeError::MalformedHeader { offset, reason } => {
                write!(f, "malformed header at offset {offset:#x}: {reason}")
            }
            PeError::InvariantViolation { reason } => {
                write!(f, "image invariant violated: {reason}")
            }
            PeError::SpecTooLarge { reason } => {
                write!(f, "fixture spec exceeds PE32 limits: {reason}")
            }
            PeError::BadSpec { line, reason } => {
                write!(f, "bad fixture spec at line {line}: {reason}")
            }
        }
    }
}

impl std::error::Error for PeError {}

// ---- little-endian read/write helpers ----

fn read_u16(data: &[u8], offset: usize) -> Result<u16, PeError> {
    let end = offset.checked_add(2).ok_or(PeError::Truncated { offset, needed: 2 })?;
    if end > data.len() {
        return Err(PeError::Truncated { offset, needed: 2 });
    }
    Ok(u16::from_le_bytes([data[offset], data[offset + 1]]))
}

fn read_u32(data: &[u8], offset: usize) -> Result<u32, PeError> {
    let end = offset.checked_add(4).ok_or(PeError::Truncated { offset, needed: 4 })?;
    if end > data.len() {
        return Err(PeError::Truncated { offset, needed: 4 });
    }
    Ok(u32::from_le_bytes([
        data[offset],
        data[offset + 1],
        data[offset + 2],
        data[offset + 3],
    ]))
}

fn read_u64(data: &[u8], offset: usize) -> Result<u64, PeError> {
    let end = offset.checked_add(8).ok_or(PeError::Truncated { offset, needed: 8 })?;
    if end > data.len() {
        return Err(PeError::Truncated { offset, needed: 8 });
    }
    let mut b = [0u8; 8];
    b.copy_from_slice(&data[offset..end]);
    Ok(u64::from_le_bytes(b))
}

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn patch_u32(buf: &mut [u8], offset: usize, v: u32) {
    buf[offset..offset + 4].copy_from_slice(&v.to_le_bytes());
}

/// Round `x` up to the next multiple of `align` (`align > 0`).
pub fn round_up(x: u32, align: u32) -> u32 {
    debug_assert!(align > 0);
    match x % align {
        0 => x,
        r => x + (align - r),
    }
}

// ---- header types ----

/// DOS header: magic, the pointer to the PE signature, and everything else
/// preserved verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DosHeader {
    pub magic: u16,
    /// File offset of the PE signature.
    pub e_lfanew: u32,
    /// Bytes 2..0x3C of the header, kept opaque for round-tripping.
    pub reserved: [u8; 58],
}

/// COFF file header. Only a few fields are interpreted; the rest round-trip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeFileHeader {
    pub machine: u16,
    pub number_of_sections: u16,
    pub time_date_stamp: u32,
    pub pointer_to_symbol_table: u32,
    pub number_of_symbols: u32,
    pub size_of_optional_header: u16,
    pub characteristics: u16,
}

/// One data-directory entry (RVA + size).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DataDirectory {
    pub rva: u32,
    pub size: u32,
}

/// Which optional-header flavor the file uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptionalKind {
    Pe32,
    Pe32Plus,
}

/// Optional header. Named fields are the ones the pipeline reads or patches;
/// `raw` holds the full header bytes as parsed so unmodeled fields survive a
/// round trip. On serialization the named fields are patched back into `raw`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OptionalHeader {
    pub kind: OptionalKind,
    pub entry_point_rva: u32,
    pub image_base: u64,
    pub section_alignment: u32,
    pub file_alignment: u32,
    pub size_of_image: u32,
    pub size_of_headers: u32,
    /// Always exactly 16 entries.
    pub data_directories: Vec<DataDirectory>,
    raw: Vec<u8>,
}

impl OptionalHeader {
    /// Import directory entry (index 1).
    pub fn import_directory(&self) -> DataDirectory {
        self.data_directories[IMPORT_DIRECTORY_INDEX]
    }

    fn fixed_len(kind: OptionalKind) -> usize {
        match kind {
            OptionalKind::Pe32 => OPT32_FIXED_LEN,
            OptionalKind::Pe32Plus => OPT64_FIXED_LEN,
        }
    }

    fn parse(data: &[u8], offset: usize, declared_len: usize) -> Result<Self, PeError> {
        let magic = read_u16(data, offset)?;
        let kind = match magic {
            PE32_MAGIC => OptionalKind::Pe32,
            PE32PLUS_MAGIC => OptionalKind::Pe32Plus,
            other => {
                return Err(PeError::BadMagic {
                    offset,
                    found: other as u32,
                    expected: PE32_MAGIC as u32,
                })
            }
        };
        let fixed = Self::fixed_len(kind);
        let full = fixed + DATA_DIRECTORY_COUNT * 8;
        if declared_len != full {
            return Err(PeError::MalformedHeader {
                offset,
                reason: format!(
                    "size_of_optional_header is {declared_len}, expected {full} for this magic"
                ),
            });
        }
        if offset + full > data.len() {
            return Err(PeError::Truncated { offset, needed: full });
        }

        let num_dirs_offset = offset + fixed - 4;
        let num_dirs = read_u32(data, num_dirs_offset)?;
        if num_dirs as usize != DATA_DIRECTORY_COUNT {
            return Err(PeError::MalformedHeader {
                offset: num_dirs_offset,
                reason: format!("number_of_rva_and_sizes is {num_dirs}, expected 16"),
            });
        }

        let image_base = match kind {
            OptionalKind::Pe32 => read_u32(data, offset + 28)? as u64,
            OptionalKind::Pe32Plus => read_u64(data, offset + 24)?,
        };
        let section_alignment = read_u32(data, offset + 32)?;
        let file_alignment = read_u32(data, offset + 36)?;
        if file_alignment < 512 || !file_alignment.is_power_of_two() {
            return Err(PeError::MalformedHeader {
                offset: offset + 36,
                reason: format!("file_alignment {file_alignment} is not a power of two >= 512"),
            });
        }
        if section_alignment < file_alignment {
            return Err(PeError::MalformedHeader {
                offset: offset + 32,
                reason: format!(
                    "section_alignment {section_alignment} < file_alignment {file_alignment}"
                ),
            });
        }
        let size_of_image = read_u32(data, offset + 56)?;
        if size_of_image % section_alignment != 0 {
            return Err(PeError::MalformedHeader {
                offset: offset + 56,
                reason: format!(
                    "size_of_image {size_of_image:#x} is not a multiple of section_alignment"
                ),
            });
        }

        let mut data_directories = Vec::with_capacity(DATA_DIRECTORY_COUNT);
        for i in 0..DATA_DIRECTORY_COUNT {
            let o = offset + fixed + i * 8;
            data_directories.push(DataDirectory {
                rva: read_u32(data, o)?,
                size: read_u32(data, o + 4)?,
            });
        }

        Ok(OptionalHeader {
            kind,
            entry_point_rva: read_u32(data, offset + 16)?,
            image_base,
            section_alignment,
            file_alignment,
            size_of_image,
            size_of_headers: read_u32(data, offset + 60)?,
            data_directories,
            raw: data[offset..offset + full].to_vec(),
        })
    }

    fn serialize(&self) -> Result<Vec<u8>, PeError> {
        if self.data_directories.len() != DATA_DIRECTORY_COUNT {
            return Err(PeError::InvariantViolation {
                reason: format!(
                    "optional header has {} data directories, expected 16",
                    self.data_directories.len()
                ),
            });
        }
        let fixed = Self::fixed_len(self.kind);
        let mut out = self.raw.clone();
        patch_u32(&mut out, 16, self.entry_point_rva);
        match self.kind {
            OptionalKind::Pe32 => {
                if self.image_base > u32::MAX as u64 {
                    return Err(PeError::InvariantViolation {
                        reason: "PE32 image_base exceeds 32 bits".into(),
                    });
                }
                patch_u32(&mut out, 28, self.image_base as u32);
            }
            OptionalKind::Pe32Plus => {
                out[24..32].copy_from_slice(&self.image_base.to_le_bytes());
            }
        }
        patch_u32(&mut out, 32, self.section_alignment);
        patch_u32(&mut out, 36, self.file_alignment);
        patch_u32(&mut out, 56, self.size_of_image);
        patch_u32(&mut out, 60, self.size_of_headers);
        for (i, d) in self.data_directories.iter().enumerate() {
            patch_u32(&mut out, fixed + i * 8, d.rva);
            patch_u32(&mut out, fixed + i * 8 + 4, d.size);
        }
        Ok(out)
    }

    /// Build a fresh PE32 optional header with sane defaults for fields the
    /// synthesizer does not care about.
    fn synthesize_pe32(
        entry_point_rva: u32,
        code_size: u32,
        section_alignment: u32,
        file_alignment: u32,
        size_of_image: u32,
        size_of_headers: u32,
        data_directories: Vec<DataDirectory>,
    ) -> Self {
        let mut raw = Vec::with_capacity(OPT32_FIXED_LEN + DATA_DIRECTORY_COUNT * 8);
        put_u16(&mut raw, PE32_MAGIC);
        raw.push(14); // linker major
        raw.push(0); // linker minor
        put_u32(&mut raw, code_size);
        put_u32(&mut raw, 0); // size_of_initialized_data
        put_u32(&mut raw, 0); // size_of_uninitialized_data
        put_u32(&mut raw, entry_point_rva);
        put_u32(&mut raw, entry_point_rva); // base_of_code
        put_u32(&mut raw, 0); // base_of_data
        put_u32(&mut raw, 0x0040_0000); // image_base
        put_u32(&mut raw, section_alignment);
        put_u32(&mut raw, file_alignment);
        put_u16(&mut raw, 6); // os major
        put_u16(&mut raw, 0);
        put_u16(&mut raw, 0); // image version
        put_u16(&mut raw, 0);
        put_u16(&mut raw, 6); // subsystem major
        put_u16(&mut raw, 0);
        put_u32(&mut raw, 0); // win32 version
        put_u32(&mut raw, size_of_image);
        put_u32(&mut raw, size_of_headers);
        put_u32(&mut raw, 0); // checksum
        put_u16(&mut raw, 3); // subsystem: console
        put_u16(&mut raw, 0); // dll characteristics
        put_u32(&mut raw, 0x0010_0000); // stack reserve
        put_u32(&mut raw, 0x1000); // stack commit
        put_u32(&mut raw, 0x0010_0000); // heap reserve
        put_u32(&mut raw, 0x1000); // heap commit
        put_u32(&mut raw, 0); // loader flags
        put_u32(&mut raw, DATA_DIRECTORY_COUNT as u32);
        for d in &data_directories {
            put_u32(&mut raw, d.rva);
            put_u32(&mut raw, d.size);
        }
        OptionalHeader {
            kind: OptionalKind::Pe32,
            entry_point_rva,
            image_base: 0x0040_0000,
            section_alignment,
            file_alignment,
            size_of_image,
            size_of_headers,
            data_directories,
            raw,
        }
    }
}

/// One row of the section table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionHeader {
    pub name: [u8; 8],
    pub virtual_size: u32,
    pub virtual_address: u32,
    pub size_of_raw_data: u32,
    pub pointer_to_raw_data: u32,
    pub pointer_to_relocations: u32,
    pub pointer_to_linenumbers: u32,
    pub number_of_relocations: u16,
    pub number_of_linenumbers: u16,
    pub characteristics: u32,
}

impl SectionHeader {
    /// Section name with trailing NULs stripped, lossy on non-UTF-8.
    pub fn name_str(&self) -> String {
        let end = self.name.iter().position(|&b| b == 0).unwrap_or(8);
        String::from_utf8_lossy(&self.name[..end]).into_owned()
    }

    /// Whether the section is marked executable.
    pub fn is_executable(&self) -> bool {
        self.characteristics & SCN_MEM_EXECUTE != 0
    }

    fn parse(data: &[u8], offset: usize) -> Result<Self, PeError> {
        if offset + SECTION_HEADER_LEN > data.len() {
            return Err(PeError::Truncated { offset, needed: SECTION_HEADER_LEN });
        }
        let mut name = [0u8; 8];
        name.copy_from_slice(&data[offset..offset + 8]);
        Ok(SectionHeader {
            name,
            virtual_size: read_u32(data, offset + 8)?,
            virtual_address: read_u32(data, offset + 12)?,
            size_of_raw_data: read_u32(data, offset + 16)?,
            pointer_to_raw_data: read_u32(data, offset + 20)?,
            pointer_to_relocations: read_u32(data, offset + 24)?,
            pointer_to_linenumbers: read_u32(data, offset + 28)?,
            number_of_relocations: read_u16(data, offset + 32)?,
            number_of_linenumbers: read_u16(data, offset + 34)?,
            characteristics: read_u32(data, offset + 36)?,
        })
    }

    fn serialize(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.name);
        put_u32(out, self.virtual_size);
        put_u32(out, self.virtual_address);
        put_u32(out, self.size_of_raw_data);
        put_u32(out, self.pointer_to_raw_data);
        put_u32(out, self.pointer_to_relocations);
        put_u32(out, self.pointer_to_linenumbers);
        put_u16(out, self.number_of_relocations);
        put_u16(out, self.number_of_linenumbers);
        put_u32(out, self.characteristics);
    }
}

/// A section header plus its raw file bytes.
///
/// `gap_before` holds whatever sits between the previous section's raw data
/// (or the header region, for the first section) and this section's
/// `pointer_to_raw_data` — alignment padding, or a former overlay after an
/// append. Preserving it keeps round trips byte-exact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeSection {
    pub header: SectionHeader,
    /// Exactly `size_of_raw_data` bytes.
    pub data: Vec<u8>,
    pub gap_before: Vec<u8>,
}

/// A fully parsed PE file. See the module docs for the fidelity contract.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeImage {
    pub dos: DosHeader,
    /// Bytes between the DOS header and the PE signature (DOS stub, rich
    /// header, ...), preserved verbatim.
    pub dos_stub: Vec<u8>,
    pub file_header: PeFileHeader,
    pub optional: OptionalHeader,
    /// Bytes between the end of the section table and the first section's
    /// raw data. The editor carves new section headers out of this region.
    pub header_fill: Vec<u8>,
    /// Sections in file order, ascending `virtual_address`.
    pub sections: Vec<PeSection>,
    /// Overlay bytes after the last section's raw data.
    pub trailing: Vec<u8>,
}

/// One import descriptor's worth of names, already lowercased.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImportEntry {
    pub dll_name: String,
    pub function_names: Vec<String>,
    /// Thunks imported by ordinal rather than by name.
    pub by_ordinal_count: usize,
}

impl PeImage {
    /// Offset of the section table within the file.
    pub fn section_table_offset(&self) -> usize {
        self.dos.e_lfanew as usize + 4 + COFF_HEADER_LEN + self.optional.raw.len()
    }

    /// Total serialized length in bytes.
    pub fn file_len(&self) -> usize {
        let mut len = self.section_table_offset()
            + self.sections.len() * SECTION_HEADER_LEN
            + self.header_fill.len();
        for s in &self.sections {
            len += s.gap_before.len() + s.data.len();
        }
        len + self.trailing.len()
    }

    /// Convenience wrapper around [`parse_pe`].
    pub fn parse(bytes: &[u8]) -> Result<Self, PeError> {
        parse_pe(bytes)
    }

    /// Convenience wrapper around [`serialize_pe`].
    pub fn to_bytes(&self) -> Result<Vec<u8>, PeError> {
        serialize_pe(self)
    }
}

// ---- parse ----

/// Parse `bytes` into a [`PeImage`], rejecting anything malformed.
pub fn parse_pe(bytes: &[u8]) -> Result<PeImage, PeError> {
    if bytes.len() < DOS_HEADER_LEN {
        return Err(PeError::Truncated { offset: 0, needed: DOS_HEADER_LEN });
    }
    let magic = read_u16(bytes, 0)?;
    if magic != DOS_MAGIC {
        return Err(PeError::BadMagic {
            offset: 0,
            found: magic as u32,
            expected: DOS_MAGIC as u32,
        });
    }
    let e_lfanew = read_u32(bytes, E_LFANEW_OFFSET)?;
    if (e_lfanew as usize) < DOS_HEADER_LEN {
        return Err(PeError::MalformedHeader {
            offset: E_LFANEW_OFFSET,
            reason: format!("e_lfanew {e_lfanew:#x} points inside the DOS header"),
        });
    }
    let pe_off = e_lfanew as usize;
    let signature = read_u32(bytes, pe_off)?;
    if signature != PE_SIGNATURE {
        return Err(PeError::BadMagic {
            offset: pe_off,
            found: signature,
            expected: PE_SIGNATURE,
        });
    }

    let mut reserved = [0u8; 58];
    reserved.copy_from_slice(&bytes[2..E_LFANEW_OFFSET]);
    let dos = DosHeader { magic, e_lfanew, reserved };
    let dos_stub = bytes[DOS_HEADER_LEN..pe_off].to_vec();

    let coff_off = pe_off + 4;
    let file_header = PeFileHeader {
        machine: read_u16(bytes, coff_off)?,
        number_of_sections: read_u16(bytes, coff_off + 2)?,
        time_date_stamp: read_u32(bytes, coff_off + 4)?,
        pointer_to_symbol_table: read_u32(bytes, coff_off + 8)?,
        number_of_symbols: read_u32(bytes, coff_off + 12)?,
        size_of_optional_header: read_u16(bytes, coff_off + 16)?,
        characteristics: read_u16(bytes, coff_off + 18)?,
    };

    let opt_off = coff_off + COFF_HEADER_LEN;
    let optional =
        OptionalHeader::parse(bytes, opt_off, file_header.size_of_optional_header as usize)?;

    let table_off = opt_off + optional.raw.len();
    let n = file_header.number_of_sections as usize;
    let mut headers = Vec::with_capacity(n);
    for i in 0..n {
        let h = SectionHeader::parse(bytes, table_off + i * SECTION_HEADER_LEN)?;
        let ho = table_off + i * SECTION_HEADER_LEN;
        if h.virtual_address % optional.section_alignment != 0 {
            return Err(PeError::MalformedHeader {
                offset: ho + 12,
                reason: format!(
                    "section {} virtual_address {:#x} not aligned to {:#x}",
                    i, h.virtual_address, optional.section_alignment
                ),
            });
        }
        if h.size_of_raw_data > 0 {
            if h.pointer_to_raw_data % optional.file_alignment != 0 {
                return Err(PeError::MalformedHeader {
                    offset: ho + 20,
                    reason: format!(
                        "section {} pointer_to_raw_data {:#x} not aligned to {:#x}",
                        i, h.pointer_to_raw_data, optional.file_alignment
                    ),
                });
            }
            let end = h.pointer_to_raw_data as u64 + h.size_of_raw_data as u64;
            if end > bytes.len() as u64 {
                return Err(PeError::Truncated {
                    offset: h.pointer_to_raw_data as usize,
                    needed: h.size_of_raw_data as usize,
                });
            }
        }
        if let Some(prev) = headers.last() {
            let prev: &SectionHeader = prev;
            if h.virtual_address <= prev.virtual_address {
                return Err(PeError::MalformedHeader {
                    offset: ho + 12,
                    reason: format!(
                        "section {} virtual_address {:#x} not ascending",
                        i, h.virtual_address
                    ),
                });
            }
        }
        headers.push(h);
    }

    // Raw data must appear in section order without overlap; arbitrary gap
    // bytes between regions are captured, not rejected.
    let table_end = table_off + n * SECTION_HEADER_LEN;
    if table_end > bytes.len() {
        return Err(PeError::Truncated { offset: table_off, needed: n * SECTION_HEADER_LEN });
    }
    let mut cursor = table_end;
    let mut header_fill = Vec::new();
    let mut sections = Vec::with_capacity(n);
    let mut first_raw = true;
    for (i, h) in headers.into_iter().enumerate() {
        if h.size_of_raw_data == 0 {
            sections.push(PeSection { header: h, data: Vec::new(), gap_before: Vec::new() });
            continue;
        }
        let ptr = h.pointer_to_raw_data as usize;
        if ptr < cursor {
            return Err(PeError::MalformedHeader {
                offset: ptr,
                reason: format!("section {i} raw data overlaps earlier content"),
            });
        }
        let gap = bytes[cursor..ptr].to_vec();
        cursor = ptr + h.size_of_raw_data as usize;
        let data = bytes[ptr..cursor].to_vec();
        if first_raw {
            header_fill = gap;
            sections.push(PeSection { header: h, data, gap_before: Vec::new() });
            first_raw = false;
        } else {
            sections.push(PeSection { header: h, data, gap_before: gap });
        }
    }
    let trailing = bytes[cursor..].to_vec();

    Ok(PeImage { dos, dos_stub, file_header, optional, header_fill, sections, trailing })
}

// ---- serialize ----

/// Serialize `image` back to bytes, re-checking structural invariants first.
pub fn serialize_pe(image: &PeImage) -> Result<Vec<u8>, PeError> {
    let invariant = |reason: String| PeError::InvariantViolation { reason };

    if image.dos.magic != DOS_MAGIC {
        return Err(invariant("DOS magic is not MZ".into()));
    }
    if image.dos.e_lfanew as usize != DOS_HEADER_LEN + image.dos_stub.len() {
        return Err(invariant(format!(
            "e_lfanew {:#x} disagrees with DOS stub length {}",
            image.dos.e_lfanew,
            image.dos_stub.len()
        )));
    }
    if image.file_header.number_of_sections as usize != image.sections.len() {
        return Err(invariant(format!(
            "number_of_sections {} disagrees with section list length {}",
            image.file_header.number_of_sections,
            image.sections.len()
        )));
    }
    let opt = &image.optional;
    if opt.file_alignment < 512 || !opt.file_alignment.is_power_of_two() {
        return Err(invariant(format!(
            "file_alignment {} is not a power of two >= 512",
            opt.file_alignment
        )));
    }
    if opt.section_alignment < opt.file_alignment {
        return Err(invariant("section_alignment < file_alignment".into()));
    }
    if opt.size_of_image % opt.section_alignment != 0 {
        return Err(invariant(format!(
            "size_of_image {:#x} is not a multiple of section_alignment",
            opt.size_of_image
        )));
    }

    let mut out = Vec::with_capacity(image.file_len());
    put_u16(&mut out, image.dos.magic);
    out.extend_from_slice(&image.dos.reserved);
    put_u32(&mut out, image.dos.e_lfanew);
    out.extend_from_slice(&image.dos_stub);
    put_u32(&mut out, PE_SIGNATURE);
    let fh = &image.file_header;
    put_u16(&mut out, fh.machine);
    put_u16(&mut out, fh.number_of_sections);
    put_u32(&mut out, fh.time_date_stamp);
    put_u32(&mut out, fh.pointer_to_symbol_table);
    put_u32(&mut out, fh.number_of_symbols);
    put_u16(&mut out, fh.size_of_optional_header);
    put_u16(&mut out, fh.characteristics);
    let opt_bytes = opt.serialize()?;
    if fh.size_of_optional_header as usize != opt_bytes.len() {
        return Err(invariant(format!(
            "size_of_optional_header {} disagrees with optional header length {}",
            fh.size_of_optional_header,
            opt_bytes.len()
        )));
    }
    out.extend_from_slice(&opt_bytes);

    let mut prev_va: Option<u32> = None;
    for (i, s) in image.sections.iter().enumerate() {
        if let Some(pva) = prev_va {
            if s.header.virtual_address <= pva {
                return Err(invariant(format!("section {i} virtual_address not ascending")));
            }
        }
        prev_va = Some(s.header.virtual_address);
        if s.data.len() != s.header.size_of_raw_data as usize {
            return Err(invariant(format!(
                "section {i} holds {} bytes but declares size_of_raw_data {}",
                s.data.len(),
                s.header.size_of_raw_data
            )));
        }
        s.header.serialize(&mut out);
    }

    out.extend_from_slice(&image.header_fill);
    for (i, s) in image.sections.iter().enumerate() {
        if s.header.size_of_raw_data == 0 {
            continue;
        }
        out.extend_from_slice(&s.gap_before);
        if out.len() != s.header.pointer_to_raw_data as usize {
            return Err(invariant(format!(
                "section {i} pointer_to_raw_data {:#x} disagrees with file layout {:#x}",
                s.header.pointer_to_raw_data,
                out.len()
            )));
        }
        if s.header.pointer_to_raw_data % opt.file_alignment != 0 {
            return Err(invariant(format!(
                "section {i} pointer_to_raw_data not aligned to file_alignment"
            )));
        }
        out.extend_from_slice(&s.data);
    }
    out.extend_from_slice(&image.trailing);
    Ok(out)
}

// ---- fixture synthesis ----

/// Deterministic fill pattern for a synthesized code section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CodePattern {
    /// Repeating short pattern; byte entropy stays low.
    LowEntropy,
    /// Seeded uniform random bytes; byte entropy near 8 bits.
    HighEntropy,
    /// Verbatim bytes.
    Bytes(Vec<u8>),
}

/// What to import, per DLL.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ImportSpec {
    pub dll: String,
    pub functions: Vec<String>,
    /// Extra imports by ordinal number (no name).
    pub ordinals: Vec<u16>,
}

/// Recipe for a synthetic minimal PE32 fixture.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub imports: Vec<ImportSpec>,
    /// Desired section count; values below 2 are raised to 2.
    pub section_count: u32,
    pub file_alignment: u32,
    pub section_alignment: u32,
    pub code: CodePattern,
    /// Optional ASCII marker embedded in the first data section.
    pub marker: Option<String>,
    /// Mark the image as a DLL.
    pub dll: bool,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            imports: Vec::new(),
            section_count: 2,
            file_alignment: 512,
            section_alignment: 4096,
            code: CodePattern::LowEntropy,
            marker: None,
            dll: false,
            seed: 0,
        }
    }
}

impl FixtureSpec {
    /// Parse the line-oriented key-value fixture document.
    ///
    /// ```text
    /// sections 3
    /// file_alignment 512
    /// section_alignment 4096
    /// seed 7
    /// code high            # or: low
    /// marker Hello World
    /// kind dll             # default: exe
    /// import kernel32.dll exitprocess,getmodulehandlea
    /// ordinal user32.dll 1,17
    /// ```
    pub fn from_document(text: &str) -> Result<Self, PeError> {
        let mut spec = FixtureSpec::default();
        let bad = |line: usize, reason: &str| PeError::BadSpec { line, reason: reason.into() };
        for (idx, raw_line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, rest) = match line.split_once(char::is_whitespace) {
                Some((k, r)) => (k, r.trim()),
                None => (line, ""),
            };
            match key {
                "sections" => {
                    spec.section_count =
                        rest.parse().map_err(|_| bad(lineno, "sections wants an integer"))?
                }
                "file_alignment" => {
                    spec.file_alignment =
                        rest.parse().map_err(|_| bad(lineno, "file_alignment wants an integer"))?
                }
                "section_alignment" => {
                    spec.section_alignment = rest
                        .parse()
                        .map_err(|_| bad(lineno, "section_alignment wants an integer"))?
                }
                "seed" => {
                    spec.seed = rest.parse().map_err(|_| bad(lineno, "seed wants an integer"))?
                }
                "code" => {
                    spec.code = match rest {
                        "low" | "low_entropy" => CodePattern::LowEntropy,
                        "high" | "high_entropy" => CodePattern::HighEntropy,
                        _ => return Err(bad(lineno, "code wants 'low' or 'high'")),
                    }
                }
                "marker" => spec.marker = Some(rest.to_string()),
                "kind" => {
                    spec.dll = match rest {
                        "dll" => true,
                        "exe" => false,
                        _ => return Err(bad(lineno, "kind wants 'exe' or 'dll'")),
                    }
                }
                "import" | "ordinal" => {
                    let (dll, names) = rest
                        .split_once(char::is_whitespace)
                        .ok_or_else(|| bad(lineno, "wants '<dll> <comma-list>'"))?;
                    let entry = match spec.imports.iter_mut().find(|e| e.dll == dll) {
                        Some(e) => e,
                        None => {
                            spec.imports.push(ImportSpec {
                                dll: dll.to_string(),
                                ..ImportSpec::default()
                            });
                            spec.imports.last_mut().unwrap()
                        }
                    };
                    for item in names.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                        if key == "import" {
                            entry.functions.push(item.to_string());
                        } else {
                            entry.ordinals.push(
                                item.parse()
                                    .map_err(|_| bad(lineno, "ordinal wants integers"))?,
                            );
                        }
                    }
                }
                _ => return Err(bad(lineno, "unknown key")),
            }
        }
        Ok(spec)
    }
}

/// Deterministic xorshift fill so fixtures do not need an RNG dependency here.
fn fill_pattern(code: &CodePattern, len: usize, seed: u64) -> Vec<u8> {
    match code {
        CodePattern::Bytes(b) => {
            let mut out = b.clone();
            out.resize(len, 0);
            out
        }
        CodePattern::LowEntropy => {
            let pat = [0x55u8, 0x8B, 0xEC, 0x90];
            (0..len).map(|i| pat[i % pat.len()]).collect()
        }
        CodePattern::HighEntropy => {
            let mut state = seed | 1;
            let mut out = Vec::with_capacity(len);
            while out.len() < len {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                out.extend_from_slice(&state.to_le_bytes());
            }
            out.truncate(len);
            out
        }
    }
}

/// Build a minimal-but-valid PE32 fixture from `spec` and return its bytes.
///
/// The output always has a code section first, an import data section second
/// (even when `imports` is empty, in which case the import directory is
/// zero), and low-entropy filler data sections after that up to the requested
/// count. Identical specs produce identical bytes.
pub fn synthesize_min_pe(spec: &FixtureSpec) -> Result<Vec<u8>, PeError> {
    if spec.file_alignment < 512 || !spec.file_alignment.is_power_of_two() {
        return Err(PeError::SpecTooLarge {
            reason: format!("file_alignment {} is not a power of two >= 512", spec.file_alignment),
        });
    }
    if spec.section_alignment < spec.file_alignment {
        return Err(PeError::SpecTooLarge {
            reason: "section_alignment below file_alignment".into(),
        });
    }
    let n_sections = spec.section_count.max(2) as usize;
    if n_sections > 96 {
        return Err(PeError::SpecTooLarge {
            reason: format!("{n_sections} sections requested, limit is 96"),
        });
    }
    for imp in &spec.imports {
        if imp.dll.is_empty() {
            return Err(PeError::SpecTooLarge { reason: "empty DLL name".into() });
        }
        if imp.functions.iter().any(|f| f.is_empty()) {
            return Err(PeError::SpecTooLarge { reason: "empty function name".into() });
        }
        if imp.functions.is_empty() && imp.ordinals.is_empty() {
            return Err(PeError::SpecTooLarge {
                reason: format!("import entry for {} lists no functions", imp.dll),
            });
        }
    }

    // Header layout. Reserve slack for eight future section headers so the
    // editor can append without relocating anything.
    let table_off = DOS_HEADER_LEN + 4 + COFF_HEADER_LEN + OPT32_FIXED_LEN + 16 * 8;
    let table_end = table_off + n_sections * SECTION_HEADER_LEN;
    let size_of_headers = round_up((table_end + 8 * SECTION_HEADER_LEN) as u32, spec.file_alignment);

    // Section plan: .text, .idata, then filler .data sections.
    let code_len: u32 = 1024;
    let code = fill_pattern(&spec.code, code_len as usize, spec.seed);

    let text_va = spec.section_alignment.max(0x1000);
    let text_va = round_up(text_va, spec.section_alignment);
    let idata_va = text_va + round_up(code_len.max(1), spec.section_alignment);

    let (idata, import_dir, iat_dir) = build_import_blob(&spec.imports, idata_va)?;
    let idata_len = idata.len() as u32;

    let mut dirs = vec![DataDirectory::default(); DATA_DIRECTORY_COUNT];
    dirs[IMPORT_DIRECTORY_INDEX] = import_dir;
    dirs[IAT_DIRECTORY_INDEX] = iat_dir;

    struct Plan {
        name: [u8; 8],
        va: u32,
        vsize: u32,
        data: Vec<u8>,
        characteristics: u32,
    }
    let mut plans = vec![
        Plan {
            name: *b".text\0\0\0",
            va: text_va,
            vsize: code_len,
            data: code,
            characteristics: SCN_CNT_CODE | SCN_MEM_EXECUTE | SCN_MEM_READ,
        },
        Plan {
            name: *b".idata\0\0",
            va: idata_va,
            vsize: idata_len.max(1),
            data: idata,
            characteristics: SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ | SCN_MEM_WRITE,
        },
    ];
    let mut next_va = idata_va + round_up(plans[1].vsize, spec.section_alignment);
    for extra in 0..n_sections - 2 {
        let mut data = fill_pattern(&CodePattern::LowEntropy, 256, spec.seed);
        if extra == 0 {
            if let Some(marker) = &spec.marker {
                let m = marker.as_bytes();
                let n = m.len().min(data.len());
                data[..n].copy_from_slice(&m[..n]);
            }
        }
        let mut name = *b".data0\0\0";
        name[5] = b'0' + (extra as u8 % 10);
        let vsize = data.len() as u32;
        plans.push(Plan {
            name,
            va: next_va,
            vsize,
            data,
            characteristics: SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ | SCN_MEM_WRITE,
        });
        next_va += round_up(vsize, spec.section_alignment);
    }

    let mut sections = Vec::with_capacity(plans.len());
    let mut raw_ptr = size_of_headers;
    for p in plans {
        let raw_len = round_up(p.data.len().max(1) as u32, spec.file_alignment);
        let mut data = p.data;
        data.resize(raw_len as usize, 0);
        sections.push(PeSection {
            header: SectionHeader {
                name: p.name,
                virtual_size: p.vsize,
                virtual_address: p.va,
                size_of_raw_data: raw_len,
                pointer_to_raw_data: raw_ptr,
                pointer_to_relocations: 0,
                pointer_to_linenumbers: 0,
                number_of_relocations: 0,
                number_of_linenumbers: 0,
                characteristics: p.characteristics,
            },
            data,
            gap_before: Vec::new(),
        });
        raw_ptr = raw_ptr
            .checked_add(raw_len)
            .ok_or(PeError::SpecTooLarge { reason: "file exceeds 4 GiB".into() })?;
    }
    let last = sections.last().unwrap();
    let size_of_image = round_up(
        last.header.virtual_address + last.header.virtual_size.max(1),
        spec.section_alignment,
    );

    let mut characteristics = 0x0102; // EXECUTABLE_IMAGE | 32BIT_MACHINE
    if spec.dll {
        characteristics |= 0x2000;
    }
    let image = PeImage {
        dos: DosHeader { magic: DOS_MAGIC, e_lfanew: DOS_HEADER_LEN as u32, reserved: [0; 58] },
        dos_stub: Vec::new(),
        file_header: PeFileHeader {
            machine: 0x014C, // i386
            number_of_sections: sections.len() as u16,
            time_date_stamp: 0,
            pointer_to_symbol_table: 0,
            number_of_symbols: 0,
            size_of_optional_header: (OPT32_FIXED_LEN + 16 * 8) as u16,
            characteristics,
        },
        optional: OptionalHeader::synthesize_pe32(
            text_va,
            code_len,
            spec.section_alignment,
            spec.file_alignment,
            size_of_image,
            size_of_headers,
            dirs,
        ),
        header_fill: vec![0; size_of_headers as usize - table_end],
        sections,
        trailing: Vec::new(),
    };
    serialize_pe(&image)
}

/// Lay out import descriptors, thunk arrays, hint/name entries and DLL name
/// strings inside one blob based at `base_rva`. Returns the blob plus the
/// import and IAT directory entries.
fn build_import_blob(
    imports: &[ImportSpec],
    base_rva: u32,
) -> Result<(Vec<u8>, DataDirectory, DataDirectory), PeError> {
    if imports.is_empty() {
        return Ok((Vec::new(), DataDirectory::default(), DataDirectory::default()));
    }
    let desc_len = (imports.len() + 1) * 20;
    // Region sizes first so every RVA is known before writing.
    let mut thunk_counts = Vec::with_capacity(imports.len());
    for imp in imports {
        thunk_counts.push(imp.functions.len() + imp.ordinals.len() + 1);
    }
    let total_thunks: usize = thunk_counts.iter().sum();
    let int_off = desc_len;
    let iat_off = int_off + total_thunks * 4;
    let names_off = iat_off + total_thunks * 4;

    let mut names = Vec::new(); // hint/name entries then DLL names
    let mut hint_rvas = Vec::new();
    for imp in imports {
        let mut per_fn = Vec::with_capacity(imp.functions.len());
        for f in &imp.functions {
            per_fn.push(base_rva as usize + names_off + names.len());
            names.extend_from_slice(&0u16.to_le_bytes()); // hint
            names.extend_from_slice(f.as_bytes());
            names.push(0);
            if names.len() % 2 == 1 {
                names.push(0); // keep entries word-aligned like linkers do
            }
        }
        hint_rvas.push(per_fn);
    }
    let mut dll_name_rvas = Vec::with_capacity(imports.len());
    for imp in imports {
        dll_name_rvas.push(base_rva as usize + names_off + names.len());
        names.extend_from_slice(imp.dll.as_bytes());
        names.push(0);
    }

    let total_len = names_off + names.len();
    if base_rva as u64 + total_len as u64 > u32::MAX as u64 {
        return Err(PeError::SpecTooLarge { reason: "import blob exceeds 32-bit RVA space".into() });
    }

    let mut blob = vec![0u8; total_len];
    // Descriptors.
    let mut int_cursor = int_off;
    let mut iat_cursor = iat_off;
    for (i, imp) in imports.iter().enumerate() {
        let d = i * 20;
        patch_u32(&mut blob, d, base_rva + int_cursor as u32); // OriginalFirstThunk
        patch_u32(&mut blob, d + 12, dll_name_rvas[i] as u32); // Name
        patch_u32(&mut blob, d + 16, base_rva + iat_cursor as u32); // FirstThunk
        // Thunk arrays (INT and IAT hold the same values on disk).
        for (j, _) in imp.functions.iter().enumerate() {
            let v = hint_rvas[i][j] as u32;
            patch_u32(&mut blob, int_cursor, v);
            patch_u32(&mut blob, iat_cursor, v);
            int_cursor += 4;
            iat_cursor += 4;
        }
        for ord in &imp.ordinals {
            let v = 0x8000_0000u32 | *ord as u32;
            patch_u32(&mut blob, int_cursor, v);
            patch_u32(&mut blob, iat_cursor, v);
            int_cursor += 4;
            iat_cursor += 4;
        }
        int_cursor += 4; // terminators stay zero
        iat_cursor += 4;
    }
    blob[names_off..].copy_from_slice(&names);

    let import_dir = DataDirectory { rva: base_rva, size: desc_len as u32 };
    let iat_dir =
        DataDirectory { rva: base_rva + iat_off as u32, size: (total_thunks * 4) as u32 };
    Ok((blob, import_dir, iat_dir))
}

/// Hand-assembled single-section PE32+ image used by tests: the parser and
/// round trip must handle it, the editor must refuse it.
#[cfg(test)]
pub(crate) fn build_min_pe32plus() -> Vec<u8> {
    let mut out = Vec::new();
    put_u16(&mut out, DOS_MAGIC);
    out.extend_from_slice(&[0u8; 58]);
    put_u32(&mut out, 64); // e_lfanew
    put_u32(&mut out, PE_SIGNATURE);
    put_u16(&mut out, 0x8664); // machine: x86-64
    put_u16(&mut out, 1); // sections
    put_u32(&mut out, 0);
    put_u32(&mut out, 0);
    put_u32(&mut out, 0);
    put_u16(&mut out, (OPT64_FIXED_LEN + 128) as u16);
    put_u16(&mut out, 0x0022);
    let opt_start = out.len();
    put_u16(&mut out, PE32PLUS_MAGIC);
    out.push(14);
    out.push(0);
    put_u32(&mut out, 512); // size_of_code
    put_u32(&mut out, 0);
    put_u32(&mut out, 0);
    put_u32(&mut out, 0x1000); // entry point
    put_u32(&mut out, 0x1000); // base_of_code
    out.extend_from_slice(&0x1_4000_0000u64.to_le_bytes()); // image_base
    put_u32(&mut out, 0x1000); // section_alignment
    put_u32(&mut out, 512); // file_alignment
    out.extend_from_slice(&[0u8; 8]); // os + image versions
    put_u16(&mut out, 6); // subsystem version
    put_u16(&mut out, 0);
    put_u32(&mut out, 0); // win32 version
    put_u32(&mut out, 0x2000); // size_of_image
    put_u32(&mut out, 512); // size_of_headers
    put_u32(&mut out, 0); // checksum
    put_u16(&mut out, 3);
    put_u16(&mut out, 0);
    out.extend_from_slice(&[0u8; 32]); // stack/heap reserves (4 x u64)
    put_u32(&mut out, 0); // loader flags
    put_u32(&mut out, 16);
    out.extend_from_slice(&[0u8; 128]); // data directories
    debug_assert_eq!(out.len() - opt_start, OPT64_FIXED_LEN + 128);
    out.extend_from_slice(b".text\0\0\0");
    put_u32(&mut out, 512); // virtual_size
    put_u32(&mut out, 0x1000); // virtual_address
    put_u32(&mut out, 512); // size_of_raw_data
    put_u32(&mut out, 512); // pointer_to_raw_data
    out.extend_from_slice(&[0u8; 12]);
    put_u16(&mut out, 0);
    put_u16(&mut out, 0);
    put_u32(&mut out, SCN_CNT_CODE | SCN_MEM_EXECUTE | SCN_MEM_READ);
    out.resize(512, 0); // header fill
    out.extend_from_slice(&[0x90u8; 512]); // section data
    out
}

// ---- tests ----

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with_imports() -> FixtureSpec {
        FixtureSpec {
            imports: vec![
                ImportSpec {
                    dll: "kernel32.dll".into(),
                    functions: vec!["exitprocess".into(), "getmodulehandlea".into()],
                    ordinals: vec![],
                },
                ImportSpec {
                    dll: "user32.dll".into(),
                    functions: vec!["messageboxa".into()],
                    ordinals: vec![17],
                },
            ],
            section_count: 3,
            marker: Some("Hello World".into()),
            ..FixtureSpec::default()
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let bytes = synthesize_min_pe(&spec_with_imports()).unwrap();
        let image = parse_pe(&bytes).unwrap();
        assert_eq!(serialize_pe(&image).unwrap(), bytes);
    }

    #[test]
    fn round_trip_preserves_overlay_and_stub() {
        let mut bytes = synthesize_min_pe(&FixtureSpec::default()).unwrap();
        bytes.extend_from_slice(b"OVERLAY-DATA");
        let image = parse_pe(&bytes).unwrap();
        assert_eq!(image.trailing, b"OVERLAY-DATA");
        assert_eq!(serialize_pe(&image).unwrap(), bytes);

        // Rebuild with a 512-byte DOS stub: everything after the DOS header
        // shifts by 512, so every file pointer must be patched to match.
        let mut stub = b"this program cannot be run in DOS mode".to_vec();
        stub.resize(512, 0);
        let mut with_stub = image.clone();
        with_stub.dos_stub = stub.clone();
        with_stub.dos.e_lfanew += 512;
        for s in &mut with_stub.sections {
            s.header.pointer_to_raw_data += 512;
        }
        let moved_bytes = serialize_pe(&with_stub).unwrap();
        let moved = parse_pe(&moved_bytes).unwrap();
        assert_eq!(moved.dos_stub, stub);
        assert_eq!(moved.trailing, b"OVERLAY-DATA");
        assert_eq!(serialize_pe(&moved).unwrap(), moved_bytes);
    }

    #[test]
    fn sixty_three_bytes_is_truncated() {
        let err = parse_pe(&[0u8; 63]).unwrap_err();
        assert_eq!(err, PeError::Truncated { offset: 0, needed: 64 });
    }

    #[test]
    fn zm_magic_is_rejected() {
        let bytes = synthesize_min_pe(&FixtureSpec::default()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        bad[1] = b'M';
        match parse_pe(&bad).unwrap_err() {
            PeError::BadMagic { offset: 0, .. } => {}
            other => panic!("expected BadMagic at 0, got {other}"),
        }
    }

    #[test]
    fn bad_pe_signature_names_its_offset() {
        let bytes = synthesize_min_pe(&FixtureSpec::default()).unwrap();
        let mut bad = bytes.clone();
        bad[DOS_HEADER_LEN] = b'X';
        match parse_pe(&bad).unwrap_err() {
            PeError::BadMagic { offset, .. } => assert_eq!(offset, DOS_HEADER_LEN),
            other => panic!("expected BadMagic, got {other}"),
        }
    }

    #[test]
    fn synthesized_fixture_has_expected_shape() {
        let bytes = synthesize_min_pe(&spec_with_imports()).unwrap();
        let image = parse_pe(&bytes).unwrap();
        assert_eq!(image.sections.len(), 3);
        assert_eq!(image.sections[0].header.name_str(), ".text");
        assert!(image.sections[0].header.is_executable());
        assert_eq!(image.sections[1].header.name_str(), ".idata");
        assert!(image.optional.import_directory().rva > 0);
        assert_eq!(image.optional.entry_point_rva, image.sections[0].header.virtual_address);
        // Marker lands in the first data section.
        assert!(image.sections[2].data.starts_with(b"Hello World"));
    }

    #[test]
    fn synthesis_is_deterministic() {
        let spec = spec_with_imports();
        assert_eq!(synthesize_min_pe(&spec).unwrap(), synthesize_min_pe(&spec).unwrap());
    }

    #[test]
    fn section_count_below_two_is_raised() {
        let spec = FixtureSpec { section_count: 0, ..FixtureSpec::default() };
        let image = parse_pe(&synthesize_min_pe(&spec).unwrap()).unwrap();
        assert_eq!(image.sections.len(), 2);
    }

    #[test]
    fn serialize_rejects_inconsistent_section_count() {
        let bytes = synthesize_min_pe(&FixtureSpec::default()).unwrap();
        let mut image = parse_pe(&bytes).unwrap();
        image.file_header.number_of_sections = 9;
        match serialize_pe(&image).unwrap_err() {
            PeError::InvariantViolation { .. } => {}
            other => panic!("expected InvariantViolation, got {other}"),
        }
    }

    #[test]
    fn serialize_rejects_unaligned_size_of_image() {
        let bytes = synthesize_min_pe(&FixtureSpec::default()).unwrap();
        let mut image = parse_pe(&bytes).unwrap();
        image.optional.size_of_image += 1;
        assert!(matches!(
            serialize_pe(&image).unwrap_err(),
            PeError::InvariantViolation { .. }
        ));
    }

    #[test]
    fn fixture_document_round_trips_through_parser() {
        let doc = "\
# demo fixture
sections 4
file_alignment 1024
section_alignment 4096
seed 99
code high
marker Hello World
import kernel32.dll exitprocess, closehandle
import user32.dll messageboxa
ordinal user32.dll 3,9
";
        let spec = FixtureSpec::from_document(doc).unwrap();
        assert_eq!(spec.section_count, 4);
        assert_eq!(spec.file_alignment, 1024);
        assert_eq!(spec.code, CodePattern::HighEntropy);
        assert_eq!(spec.imports.len(), 2);
        assert_eq!(spec.imports[1].ordinals, vec![3, 9]);
        let bytes = synthesize_min_pe(&spec).unwrap();
        let image = parse_pe(&bytes).unwrap();
        assert_eq!(serialize_pe(&image).unwrap(), bytes);
        assert_eq!(image.optional.file_alignment, 1024);
    }

    #[test]
    fn bad_fixture_document_lines_are_reported() {
        let err = FixtureSpec::from_document("sections two").unwrap_err();
        assert!(matches!(err, PeError::BadSpec { line: 1, .. }));
        let err = FixtureSpec::from_document("\n\nbogus_key 1").unwrap_err();
        assert!(matches!(err, PeError::BadSpec { line: 3, .. }));
    }

    #[test]
    fn alignment_limits_are_enforced_at_synthesis() {
        let spec = FixtureSpec { file_alignment: 256, ..FixtureSpec::default() };
        assert!(matches!(synthesize_min_pe(&spec).unwrap_err(), PeError::SpecTooLarge { .. }));
        let spec = FixtureSpec { file_alignment: 512, section_alignment: 256, ..Default::default() };
        assert!(matches!(synthesize_min_pe(&spec).unwrap_err(), PeError::SpecTooLarge { .. }));
    }

    #[test]
    fn pe32_plus_parses_and_round_trips() {
        let out = build_min_pe32plus();
        let image = parse_pe(&out).unwrap();
        assert_eq!(image.optional.kind, OptionalKind::Pe32Plus);
        assert_eq!(image.optional.image_base, 0x1_4000_0000);
        assert_eq!(serialize_pe(&image).unwrap(), out);
    }

    #[test]
    fn round_up_handles_exact_multiples() {
        assert_eq!(round_up(0, 512), 0);
        assert_eq!(round_up(512, 512), 512);
        assert_eq!(round_up(513, 512), 1024);
    }
}
