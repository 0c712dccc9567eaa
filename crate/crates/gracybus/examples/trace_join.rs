use gracybus::harness::TestCa;
use gracybus::sim::{Bus, Origin};

fn main() {
    let ca = TestCa::new(9);
    let mut bus = Bus::new();
    bus.attach(ca.member_engine("alpha", 8, 200)).unwrap();
    for (i, name) in ["bravo", "charlie", "delta"].iter().enumerate() {
        let id = bus.attach(ca.joiner_engine(name, 8, 201 + i as u64)).unwrap();
        let req = bus.engine_mut(id).unwrap().request_join().unwrap();
        bus.broadcast(Origin::Member(id), req);
        bus.run_until_quiescent(64).unwrap();
        println!("--- after join {name}");
        for rec in bus.take_log() {
            println!("seq {} {:?} {:?}", rec.seq, rec.msg_type, rec.dispositions);
        }
        for id in bus.member_ids() {
            let r = bus.engine(id).unwrap().inspect();
            println!("  {} role={} epoch={:?} h={:?} fp={:?} leaf={:?}", r.identity, r.role, r.epoch, r.tree_height, r.tree_fingerprint, r.own_leaf);
        }
    }
}
