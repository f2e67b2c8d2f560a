//! What goes over UDP: text frames, escaping, chunking of large payloads,
//! and duplicate suppression.
//!
//!     cargo run --example wire_frames

use crowdmr::domain::NodeId;
use crowdmr::membership::Term;
use crowdmr::wire::{chunk_payloads, decode, encode, DedupWindow, Message, MsgType, Payload};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let hb = Message {
        kind: MsgType::Hb,
        sender: NodeId(2),
        term: Term(4),
        seq: 17,
        payload: Payload::new().with("role", "W").with("deg", 5),
    };
    let frame = encode(&hb)?;
    print!("{}", String::from_utf8_lossy(&frame));
    assert_eq!(decode(&frame)?, hb);

    let odd = Payload::new().with("note", "a b;c=d%");
    let frame = encode(&Message { payload: odd, ..hb.clone() })?;
    print!("{}", String::from_utf8_lossy(&frame));

    let entries: Vec<(String, String)> = (0..200)
        .map(|i| (format!("Woman-room{i}"), (i * 3).to_string()))
        .collect();
    let fixed = [("cycle".to_string(), "0".to_string())];
    let chunks = chunk_payloads(MsgType::RedOut, &fixed, &entries)?;
    println!("200 counts need {} RED_OUT frames", chunks.len());

    println!("garbage: {}", decode(b"HELLO world\n").unwrap_err());

    let mut window = DedupWindow::new();
    for seq in [1, 2, 2, 5, 3, 1] {
        let fresh = window.check_duplicate(NodeId(2), seq);
        println!("seq {seq}: {}", if fresh { "deliver" } else { "duplicate" });
    }
    Ok(())
}
